"""Detection metrics: histograms, localisation gain, COCO-style AP, recall, correlation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxgeom import as_array, iou_aligned, iou_matrix
from .sampler import assign_intervals

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class UndefinedMetricError(ValueError):
    pass


def iou_histogram(ious, bin_edges: Sequence[float]) -> np.ndarray:
    """Counts per half-open bin; the top bin is closed when its edge is 1.0.

    Values outside the edges are ignored. Binning matches ``assign_intervals``.
    """
    ious = np.asarray(ious, dtype=float).reshape(-1)
    edges = np.asarray(bin_edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    idx = np.searchsorted(edges, ious, side="right") - 1
    top = len(edges) - 2
    idx[(ious == edges[-1]) & (edges[-1] == 1.0)] = top
    valid = (idx >= 0) & (idx <= top)
    return np.bincount(idx[valid], minlength=top + 1).astype(np.int64)


def localization_improvement(pre_boxes, post_boxes, gt_boxes,
                             boundaries: Sequence[float]) -> dict[int, float | None]:
    """Mean ``IoU(post, gt) - IoU(pre, gt)`` per interval of the input IoU.

    Intervals without samples map to ``None``.
    """
    pre, post, gt = (np.asarray(a, dtype=float).reshape(-1, 4)
                     for a in (pre_boxes, post_boxes, gt_boxes))
    if not (len(pre) == len(post) == len(gt)):
        raise ValueError("pre, post and gt boxes must be aligned")
    before = iou_aligned(pre, gt) if len(pre) else np.zeros(0)
    after = iou_aligned(post, gt) if len(pre) else np.zeros(0)
    idx = assign_intervals(before, boundaries)
    out: dict[int, float | None] = {}
    for j in range(len(boundaries) - 1):
        sel = idx == j
        out[j] = float(np.mean(after[sel] - before[sel])) if sel.any() else None
    return out


# ---------------------------------------------------------------------------
# AP


def _gt_lookup(gts) -> Mapping[int, object]:
    if isinstance(gts, Mapping):
        return gts
    return {int(s.scene_id): s for s in gts}


def _class_ap(dets, scenes, label: int, thr: float, n_gt: int) -> float:
    scores = np.array([d.fused_score for d in dets])
    order = np.argsort(-scores, kind="stable")
    matched: dict[int, np.ndarray] = {}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        scene = scenes.get(d.scene_id)
        if scene is None or scene.n_gts == 0:
            continue
        same = scene.classes == label
        if not same.any():
            continue
        used = matched.setdefault(d.scene_id, np.zeros(scene.n_gts, dtype=bool))
        ious = iou_matrix(np.asarray([d.box.as_tuple()]), scene.boxes)[0]
        ious = np.where(same & ~used, ious, -1.0)
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            used[j] = True
            tp[rank] = 1.0
    return _interpolated_ap(tp, n_gt)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(pos < len(tp), envelope[np.minimum(pos, len(tp) - 1)], 0.0)
    return float(np.mean(vals))


def average_precision(dets: Sequence, gts, iou_threshold: float) -> float:
    """COCO-style AP at one matching IoU, averaged over classes that have GTs.

    Detections are ranked by ``fused_score`` (equal to the classification
    score in baseline ranking). ``gts`` is a sequence of scenes or a mapping
    from scene id to scene.
    """
    scenes = _gt_lookup(gts)
    gt_counts: dict[int, int] = {}
    for s in scenes.values():
        for c in s.classes:
            gt_counts[int(c)] = gt_counts.get(int(c), 0) + 1
    if not gt_counts:
        raise UndefinedMetricError("no ground truth boxes")
    aps = []
    for label, n_gt in sorted(gt_counts.items()):
        cls_dets = [d for d in dets if d.label == label]
        aps.append(_class_ap(cls_dets, scenes, label, iou_threshold, n_gt))
    return float(np.mean(aps))


@dataclass
class APResult:
    per_threshold: dict[float, float] = field(default_factory=dict)
    mean_ap: float = 0.0


def ap_range(dets: Sequence, gts, thresholds: Sequence[float] = AP_THRESHOLDS) -> APResult:
    per = {float(t): average_precision(dets, gts, t) for t in thresholds}
    return APResult(per, float(np.mean(list(per.values()))))


# ---------------------------------------------------------------------------
# recall and correlation


def recall_curve(kept_dets: Sequence, gts, matching_ious: Sequence[float] = RECALL_IOUS) -> list[float]:
    """Fraction of GTs covered by at least one kept same-class detection at each IoU."""
    scenes = _gt_lookup(gts)
    best_parts = []
    by_scene: dict[int, list] = {}
    for d in kept_dets:
        by_scene.setdefault(d.scene_id, []).append(d)
    for sid, scene in scenes.items():
        if scene.n_gts == 0:
            continue
        best = np.zeros(scene.n_gts)
        ds = by_scene.get(sid, [])
        if ds:
            m = iou_matrix(as_array([d.box for d in ds]), scene.boxes)
            labels = np.array([d.label for d in ds])
            m = np.where(labels[:, None] == scene.classes[None, :], m, 0.0)
            best = m.max(axis=0)
        best_parts.append(best)
    if not best_parts:
        raise UndefinedMetricError("no ground truth boxes")
    best = np.concatenate(best_parts)
    return [float(np.mean(best >= t)) for t in matching_ious]


@dataclass
class CorrelationReport:
    pearson_r: float
    mae: float
    rows: list[tuple[float, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true_iou", "pred_iou"])
        for t, p in self.rows:
            w.writerow([repr(t), repr(p)])
        return buf.getvalue()


def correlation_report(pred_ious, true_ious, min_true_iou: float = 0.5) -> CorrelationReport:
    """Pearson r and MAE between predicted and true IoU for boxes with true IoU > ``min_true_iou``."""
    pred = np.asarray(pred_ious, dtype=float).reshape(-1)
    true = np.asarray(true_ious, dtype=float).reshape(-1)
    if len(pred) != len(true):
        raise ValueError("pred and true IoUs must be aligned")
    keep = true > min_true_iou
    pred, true = pred[keep], true[keep]
    if len(pred) < 2:
        raise UndefinedMetricError("need at least two points")
    if np.ptp(pred) == 0 or np.ptp(true) == 0:
        raise UndefinedMetricError("zero variance: correlation undefined")
    r = float(np.corrcoef(pred, true)[0, 1])
    mae = float(np.mean(np.abs(pred - true)))
    return CorrelationReport(r, mae, list(zip(true.tolist(), pred.tolist())))


def csv_table(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()
