"""Synthetic scenes and an RPN-like proposal source.

Positive proposals follow a geometric IoU histogram: the expected count in the
0.1-wide bin ``[0.5 + 0.1k, 0.6 + 0.1k)`` is proportional to ``decay**k``.
Each proposal is a jittered GT drawn with the sampler's rejection machinery,
so the same validity rule (the source GT must be the best match) applies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxgeom import iou_matrix
from .sampler import (
    DEFAULT_BOUNDARIES,
    JitterRange,
    SampleBatch,
    Shortfall,
    assign_intervals,
    draw_in_band,
)

RPN_BIN_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
RPN_BIN_RANGES = (
    JitterRange(0.35, 0.6, 1.5),
    JitterRange(0.25, 0.7, 1.35),
    JitterRange(0.15, 0.8, 1.2),
    JitterRange(0.08, 0.9, 1.1),
    JitterRange(0.04, 0.95, 1.05),
)
NEGATIVE_RANGE = JitterRange(0.8, 0.4, 2.5)


@dataclass(eq=False)
class Scene:
    width: float
    height: float
    boxes: np.ndarray  # (K, 4) center form
    classes: np.ndarray  # (K,)
    appearance: np.ndarray  # (K, A)
    scene_id: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        app = np.asarray(self.appearance, dtype=float)
        if app.size == 0:
            app = app.reshape(len(self.boxes), app.shape[-1] if app.ndim == 2 else 0)
        self.appearance = app.reshape(len(self.boxes), -1) if app.size else app
        if np.any(self.boxes[:, 2:] <= 0):
            raise ValueError("scene contains invalid GT boxes")

    @property
    def n_gts(self) -> int:
        return len(self.boxes)

    def to_dict(self) -> dict:
        return {
            "scene_id": int(self.scene_id),
            "width": float(self.width),
            "height": float(self.height),
            "gts": [
                {"box": [float(v) for v in b], "class_id": int(c), "appearance": [float(v) for v in a]}
                for b, c, a in zip(self.boxes, self.classes, self.appearance)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        gts = d["gts"]
        return cls(
            d["width"], d["height"],
            np.array([g["box"] for g in gts], dtype=float).reshape(-1, 4),
            [g["class_id"] for g in gts],
            np.array([g["appearance"] for g in gts], dtype=float).reshape(len(gts), -1),
            d.get("scene_id", 0),
        )


@dataclass
class SceneParams:
    n_gts: int = 3
    width: float = 640.0
    height: float = 480.0
    min_size: float = 32.0
    max_size: float = 192.0
    appearance_dim: int = 8
    n_classes: int = 1
    # largest pairwise IoU allowed between GTs; 0 keeps them disjoint
    max_pairwise_iou: float = 0.0
    placement_attempts: int = 200


@dataclass
class PlacementReport:
    requested: int
    placed: int


def simulate_scene(params: SceneParams, rng: np.random.Generator, scene_id: int = 0):
    """Place up to ``params.n_gts`` GT boxes; returns ``(scene, report)``."""
    if params.n_gts < 1:
        raise ValueError("n_gts must be >= 1")
    lo, hi = math.log(params.min_size), math.log(params.max_size)
    placed: list[np.ndarray] = []
    for _ in range(params.n_gts):
        for _attempt in range(params.placement_attempts):
            w, h = np.exp(rng.uniform(lo, hi, size=2))
            w, h = min(w, params.width), min(h, params.height)
            cx = rng.uniform(w / 2, params.width - w / 2)
            cy = rng.uniform(h / 2, params.height - h / 2)
            box = np.array([cx, cy, w, h])
            if placed:
                ious = iou_matrix(box[None], np.stack(placed))[0]
                if ious.max() > params.max_pairwise_iou:
                    continue
            placed.append(box)
            break
    k = len(placed)
    classes = rng.integers(0, params.n_classes, size=k)
    appearance = rng.standard_normal((k, params.appearance_dim))
    boxes = np.stack(placed) if placed else np.zeros((0, 4))
    scene = Scene(params.width, params.height, boxes, classes, appearance, scene_id)
    return scene, PlacementReport(params.n_gts, k)


@dataclass
class RPNSimConfig:
    proposals_per_gt: int = 40
    decay: float = 0.5
    negative_fraction: float = 0.25
    cls_noise_sigma: float = 0.6
    cls_slope: float = 4.0
    cls_offset: float = -2.0
    positive_cap: int = 100
    negative_iou: tuple[float, float] = (0.1, 0.5)
    attempts_per_proposal: int = 40
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.decay <= 1):
            raise ValueError("decay must lie in (0, 1]")
        if not (0 <= self.negative_fraction < 1):
            raise ValueError("negative_fraction must lie in [0, 1)")

    def bin_probs(self) -> np.ndarray:
        p = self.decay ** np.arange(len(RPN_BIN_RANGES), dtype=float)
        return p / p.sum()


@dataclass
class ProposalSet:
    positives: SampleBatch
    negatives: SampleBatch
    # 0.1-wide IoU bin of each positive
    bins: np.ndarray
    shortfalls: list[Shortfall] = field(default_factory=list)

    def all(self) -> SampleBatch:
        return SampleBatch.concat([self.positives, self.negatives])


def _per_gt_counts(total: int, k: int) -> np.ndarray:
    counts = np.full(k, total // k)
    counts[: total % k] += 1
    return counts


def simulate_rpn_proposals(
    scene: Scene,
    cfg: RPNSimConfig,
    rng: np.random.Generator,
    boundaries: Sequence[float] = DEFAULT_BOUNDARIES,
) -> ProposalSet:
    """Skewed positives (capped at ``cfg.positive_cap`` per scene) plus near-miss negatives.

    Positive ``interval`` values index ``boundaries``; negatives carry -1.
    """
    gts = scene.boxes
    K = len(gts)
    if K == 0:
        e = SampleBatch.empty()
        return ProposalSet(e, SampleBatch.empty(), np.zeros(0, dtype=np.int64))
    n_pos = min(cfg.positive_cap, cfg.proposals_per_gt * K)
    probs = cfg.bin_probs()
    edges = RPN_BIN_EDGES
    n_bins = len(probs)

    boxes, ious, gt_idx, bins, shortfalls = [], [], [], [], []
    for k, count in enumerate(_per_gt_counts(n_pos, K)):
        per_bin = rng.multinomial(count, probs)
        for j in range(n_bins):
            want = int(per_bin[j])
            if want == 0:
                continue
            b, i, used = draw_in_band(
                gts, k, RPN_BIN_RANGES[j], edges[j], edges[j + 1], want,
                cfg.attempts_per_proposal * want, rng, closed_top=(j == n_bins - 1),
            )
            if len(b) < want:
                shortfalls.append(Shortfall(k, j, len(b), used))
            boxes.append(b)
            ious.append(i)
            gt_idx.append(np.full(len(b), k))
            bins.append(np.full(len(b), j))
    if not ious:
        return ProposalSet(SampleBatch.empty(), SampleBatch.empty(), np.zeros(0, dtype=np.int64))
    pos_iou = np.concatenate(ious)
    positives = SampleBatch(
        np.concatenate(boxes), np.concatenate(gt_idx), pos_iou,
        assign_intervals(pos_iou, boundaries), np.full(len(pos_iou), scene.scene_id),
    )

    n_neg = int(round(len(positives) * cfg.negative_fraction / (1 - cfg.negative_fraction)))
    nb, ni, ng = [], [], []
    lo, hi = cfg.negative_iou
    for k, count in enumerate(rng.multinomial(n_neg, np.full(K, 1.0 / K))):
        if count == 0:
            continue
        b, i, _ = draw_in_band(
            gts, k, NEGATIVE_RANGE, lo, hi, int(count),
            cfg.attempts_per_proposal * int(count), rng,
        )
        nb.append(b)
        ni.append(i)
        ng.append(np.full(len(b), k))
    if nb:
        neg_iou = np.concatenate(ni)
        negatives = SampleBatch(
            np.concatenate(nb), np.concatenate(ng), neg_iou,
            np.full(len(neg_iou), -1), np.full(len(neg_iou), scene.scene_id),
        )
    else:
        negatives = SampleBatch.empty()
    return ProposalSet(positives, negatives, np.concatenate(bins), shortfalls)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def cls_scores(ious: np.ndarray, cfg: RPNSimConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`simulate_cls_score` over an array of IoUs."""
    ious = np.asarray(ious, dtype=float)
    noise = rng.normal(0.0, cfg.cls_noise_sigma, size=ious.shape) if cfg.cls_noise_sigma > 0 else 0.0
    return _sigmoid(cfg.cls_slope * ious + cfg.cls_offset + noise)


def simulate_cls_score(sample, scene: Scene, cfg: RPNSimConfig, rng: np.random.Generator) -> float:
    """Classification confidence that tracks the proposal's IoU only loosely."""
    iou = sample.iou if hasattr(sample, "iou") else float(sample)
    return float(cls_scores(np.array([iou]), cfg, rng)[0])


# ---------------------------------------------------------------------------
# line-delimited JSON


def proposals_to_rows(proposals: SampleBatch, scores: np.ndarray | None = None) -> list[dict]:
    rows = []
    for i in range(len(proposals)):
        row = {
            "box": [float(v) for v in proposals.boxes[i]],
            "gt_index": int(proposals.gt_index[i]),
            "iou": float(proposals.iou[i]),
            "interval": int(proposals.interval[i]),
        }
        if scores is not None:
            row["score"] = float(scores[i])
        rows.append(row)
    return rows


def scene_record(scene: Scene, proposals: SampleBatch | None = None,
                 scores: np.ndarray | None = None) -> str:
    d = scene.to_dict()
    if proposals is not None:
        d["proposals"] = proposals_to_rows(proposals, scores)
    return json.dumps(d, separators=(",", ":"))


def write_scenes_jsonl(path, records: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec + "\n")


def read_scenes_jsonl(path) -> list[tuple[Scene, SampleBatch | None, np.ndarray | None]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            scene = Scene.from_dict(d)
            props = scores = None
            if "proposals" in d:
                rows = d["proposals"]
                props = SampleBatch(
                    np.array([r["box"] for r in rows], dtype=float).reshape(-1, 4),
                    [r["gt_index"] for r in rows], [r["iou"] for r in rows],
                    [r["interval"] for r in rows], np.full(len(rows), scene.scene_id),
                )
                if rows and "score" in rows[0]:
                    scores = np.array([r["score"] for r in rows])
            out.append((scene, props, scores))
    return out
