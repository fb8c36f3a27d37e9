"""Refinement, IoU prediction, score fusion and greedy NMS.

The first feature extraction happens at the proposal and feeds both the
regressor and (in ``one_pass`` mode) the IoU head. ``two_pass`` re-extracts
the feature at the refined box and runs only the IoU head again; regression
is not repeated. A box that did not move keeps its first-pass feature, so the
two modes agree exactly when the regressor outputs zero deltas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxgeom import BBox, apply_deltas_array, as_array, iou_matrix
from .toyhead import HeadModel, featurize_array, match_gts

ONE_PASS = "one_pass"
TWO_PASS = "two_pass"
RANK_CLS = "cls"
RANK_FUSED = "fused"


@dataclass(frozen=True)
class Detection:
    box: BBox
    cls_score: float
    iou_pred: float
    fused_score: float
    source_proposal: BBox
    scene_id: int = 0
    label: int = 0
    # proposal overlapped no GT and passed through unrefined
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "label": self.label,
            "box": list(self.box.as_tuple()),
            "source_proposal": list(self.source_proposal.as_tuple()),
            "cls_score": self.cls_score,
            "iou_pred": self.iou_pred,
            "fused_score": self.fused_score,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BBox(*d["box"]), d["cls_score"], d["iou_pred"], d["fused_score"],
                   BBox(*d["source_proposal"]), d.get("scene_id", 0), d.get("label", 0),
                   d.get("flagged", False))


@dataclass
class HeadOutputs:
    """Per-proposal outputs of running the heads on one scene."""

    source: np.ndarray
    refined: np.ndarray
    gt_index: np.ndarray  # argmax GT of the source proposal, -1 if unmatched
    iou_one_pass: np.ndarray
    iou_two_pass: np.ndarray
    flagged: np.ndarray = field(default=None)


def _features(boxes, idx, scene, sigma_feat, rng):
    return featurize_array(boxes, scene.boxes[idx], scene.appearance[idx], sigma_feat, rng)


def run_heads(proposals: np.ndarray, scene, regressor: HeadModel | None,
              iou_model: HeadModel | None, sigma_feat: float = 0.0,
              rng: np.random.Generator | None = None) -> HeadOutputs:
    """Refine ``proposals`` and predict their IoU in both modes.

    Without a regressor the boxes pass through; without an IoU model both
    predictions are zero. Unmatched proposals are flagged, left unrefined and
    given a predicted IoU of 0.
    """
    proposals = np.asarray(proposals, dtype=float).reshape(-1, 4)
    n = len(proposals)
    gt_idx, _ = match_gts(proposals, scene.boxes)
    ok = gt_idx >= 0
    refined = proposals.copy()
    one = np.zeros(n)
    two = np.zeros(n)
    if ok.any():
        feats = _features(proposals[ok], gt_idx[ok], scene, sigma_feat, rng)
        if regressor is not None:
            refined[ok] = apply_deltas_array(proposals[ok], regressor.predict(feats))
        if iou_model is not None:
            one[ok] = iou_model.predict(feats)
            moved = np.any(refined[ok] != proposals[ok], axis=1)
            second = feats.copy()
            if moved.any():
                rows = np.flatnonzero(ok)[moved]
                # the refined box may now match a different GT
                new_idx, _ = match_gts(refined[rows], scene.boxes)
                new_idx = np.where(new_idx >= 0, new_idx, gt_idx[rows])
                second[moved] = _features(refined[rows], new_idx, scene, sigma_feat, rng)
            two[ok] = iou_model.predict(second)
    return HeadOutputs(proposals, refined, gt_idx, one, two, ~ok)


def refine(proposals, regressor: HeadModel, scene, sigma_feat: float = 0.0,
           rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Refined boxes and the unmatched-proposal flags."""
    out = run_heads(as_array(proposals) if not isinstance(proposals, np.ndarray) else proposals,
                    scene, regressor, None, sigma_feat, rng)
    return out.refined, out.flagged


def predict_iou(detection: Detection, iou_model: HeadModel, scene, mode: str = TWO_PASS,
                sigma_feat: float = 0.0, rng: np.random.Generator | None = None) -> float:
    """Predicted IoU of a single detection in the requested mode.

    ``one_pass`` reads the feature at the source proposal, ``two_pass`` the
    feature at the refined box.
    """
    if mode not in (ONE_PASS, TWO_PASS):
        raise ValueError(f"unknown IoU mode {mode!r}")
    box = detection.source_proposal if mode == ONE_PASS else detection.box
    arr = np.asarray([box.as_tuple()])
    idx, _ = match_gts(arr, scene.boxes)
    if idx[0] < 0:
        return 0.0
    return float(iou_model.predict(_features(arr, idx, scene, sigma_feat, rng))[0])


def fuse_scores(cls_scores: np.ndarray, iou_preds: np.ndarray, ranking: str) -> np.ndarray:
    if ranking == RANK_CLS:
        return np.asarray(cls_scores, dtype=float).copy()
    if ranking == RANK_FUSED:
        return np.asarray(cls_scores, dtype=float) * np.asarray(iou_preds, dtype=float)
    raise ValueError(f"unknown ranking {ranking!r}")


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        labels: np.ndarray | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in rank order.

    Ties in score go to the lower index. With ``labels`` only boxes of the
    same label suppress each other.
    """
    if not (0 < iou_threshold < 1):
        raise ValueError("iou_threshold must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    if labels is not None:
        labels = np.asarray(labels)
        overlaps = np.where(labels[:, None] == labels[None, :], overlaps, 0.0)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= overlaps[i] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms_detections(dets: Sequence[Detection], iou_threshold: float,
                   ranking: str = RANK_FUSED) -> list[Detection]:
    if not dets:
        return []
    boxes = as_array([d.box for d in dets])
    key = "fused_score" if ranking == RANK_FUSED else "cls_score"
    scores = np.array([getattr(d, key) for d in dets])
    labels = np.array([d.label for d in dets])
    return [dets[i] for i in nms(boxes, scores, iou_threshold, labels)]


def build_detections(out: HeadOutputs, cls_scores: np.ndarray, scene, mode: str,
                     ranking: str) -> list[Detection]:
    """Wrap head outputs as :class:`Detection` values with fused ranking scores."""
    if mode not in (ONE_PASS, TWO_PASS):
        raise ValueError(f"unknown IoU mode {mode!r}")
    iou_pred = out.iou_one_pass if mode == ONE_PASS else out.iou_two_pass
    fused = fuse_scores(cls_scores, iou_pred, ranking)
    labels = np.where(out.gt_index >= 0, scene.classes[np.maximum(out.gt_index, 0)], 0) \
        if scene.n_gts else np.zeros(len(out.refined), dtype=np.int64)
    return [
        Detection(
            BBox(*(float(v) for v in out.refined[i])),
            float(cls_scores[i]), float(iou_pred[i]), float(fused[i]),
            BBox(*(float(v) for v in out.source[i])),
            int(scene.scene_id), int(labels[i]), bool(out.flagged[i]),
        )
        for i in range(len(out.refined))
    ]
