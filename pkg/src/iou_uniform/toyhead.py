"""Small numpy heads trained with manual backprop.

The simulated RoI feature of a box is ``encode_deltas(box, matched_gt)`` plus
per-extraction Gaussian noise, concatenated with the matched GT's appearance
vector. Because the feature depends on where it is extracted, moving a box
changes its feature; that is the property the two-pass IoU prediction relies
on.

Both heads are ``tanh`` MLPs with one hidden layer. The regressor predicts
deltas divided by ``delta_stds`` (the usual target normalisation) and is
trained on the interval-weighted smooth-L1 loss; the IoU head has a sigmoid
output trained with smooth-L1 against the true IoU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .boxgeom import BBox, encode_deltas_array, iou_matrix
from .loss import per_sample_loss, smooth_l1
from .sampler import IntervalConfig, SampleBatch

MODEL_FORMAT = "iou-uniform-head"
MODEL_VERSION = 1
DELTA_STDS = (0.1, 0.1, 0.2, 0.2)


class UnmatchedBoxError(ValueError):
    """The box overlaps no ground truth, so no feature can be extracted."""


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureVector:
    geometric: tuple[float, float, float, float]
    appearance: tuple[float, ...]
    gt_index: int

    def as_array(self) -> np.ndarray:
        return np.asarray(self.geometric + self.appearance, dtype=float)


def match_gts(boxes: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax-IoU GT index and IoU per box; index -1 where nothing overlaps."""
    if len(gt_boxes) == 0:
        return np.full(len(boxes), -1), np.zeros(len(boxes))
    m = iou_matrix(boxes, gt_boxes)
    idx = np.argmax(m, axis=1)
    best = m[np.arange(len(boxes)), idx]
    idx = np.where(best > 0, idx, -1)
    return idx, best


def featurize_array(
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    appearance: np.ndarray,
    sigma_feat: float,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Features for boxes already paired row-wise with their matched GT."""
    geo = encode_deltas_array(boxes, gt_boxes)
    if sigma_feat > 0:
        geo = geo + rng.normal(0.0, sigma_feat, size=geo.shape)
    return np.concatenate([geo, appearance], axis=1)


def featurize(box: BBox, scene, sigma_feat: float = 0.0,
              rng: np.random.Generator | None = None) -> FeatureVector:
    arr = np.asarray([box.as_tuple()])
    idx, _ = match_gts(arr, scene.boxes)
    k = int(idx[0])
    if k < 0:
        raise UnmatchedBoxError(f"box {box.as_tuple()} overlaps no ground truth")
    f = featurize_array(arr, scene.boxes[[k]], scene.appearance[[k]], sigma_feat, rng)[0]
    return FeatureVector(tuple(float(v) for v in f[:4]), tuple(float(v) for v in f[4:]), k)


def gather_gts(samples: SampleBatch, scenes: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Matched GT boxes and appearance vectors for every row of ``samples``."""
    n = len(samples)
    if n == 0:
        a = scenes[0].appearance.shape[1] if scenes else 0
        return np.zeros((0, 4)), np.zeros((0, a))
    gt_boxes = np.empty((n, 4))
    app = np.empty((n, scenes[int(samples.scene_index[0])].appearance.shape[1]))
    for s in np.unique(samples.scene_index):
        rows = samples.scene_index == s
        scene = scenes[int(s)]
        gt_boxes[rows] = scene.boxes[samples.gt_index[rows]]
        app[rows] = scene.appearance[samples.gt_index[rows]]
    return gt_boxes, app


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class HeadModel:
    kind: str  # "regressor" or "iou"
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    # fixed per-input multipliers applied before the first layer
    input_scale: np.ndarray
    # fixed per-output multipliers (regressor: delta stds)
    output_scale: np.ndarray

    PARAMS = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, kind: str, in_dim: int, hidden: int, rng: np.random.Generator,
             out_std: float = 0.001, delta_stds: Sequence[float] = DELTA_STDS) -> "HeadModel":
        if kind not in ("regressor", "iou"):
            raise ValueError(f"unknown head kind {kind!r}")
        out = 4 if kind == "regressor" else 1
        stds = np.asarray(delta_stds, dtype=float)
        input_scale = np.ones(in_dim)
        input_scale[:4] = 1.0 / stds
        output_scale = stds.copy() if kind == "regressor" else np.ones(1)
        return cls(
            kind,
            rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, out_std, size=(hidden, out)),
            np.zeros(out),
            input_scale,
            output_scale,
        )

    @property
    def n_params(self) -> int:
        return sum(getattr(self, p).size for p in self.PARAMS)

    def copy(self) -> "HeadModel":
        return HeadModel(self.kind, *(getattr(self, a).copy() for a in
                                      ("W1", "b1", "W2", "b2", "input_scale", "output_scale")))

    def forward(self, X: np.ndarray):
        """Raw network output (normalised deltas or IoU in [0, 1]) plus a backprop cache."""
        xs = X * self.input_scale
        hidden = np.tanh(xs @ self.W1 + self.b1)
        z = hidden @ self.W2 + self.b2
        out = 1.0 / (1.0 + np.exp(-z)) if self.kind == "iou" else z
        return out, (xs, hidden, out)

    def backward(self, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        xs, hidden, out = cache
        dz = d_out * out * (1.0 - out) if self.kind == "iou" else d_out
        d_hidden = (dz @ self.W2.T) * (1.0 - hidden * hidden)
        return {
            "W1": xs.T @ d_hidden,
            "b1": d_hidden.sum(axis=0),
            "W2": hidden.T @ dz,
            "b2": dz.sum(axis=0),
        }

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Deltas (regressor) or IoU (iou head) in natural units."""
        out, _ = self.forward(X)
        if self.kind == "iou":
            return out[:, 0]
        return out * self.output_scale

    def finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, p))) for p in self.PARAMS)

    def to_json(self) -> str:
        layers = []
        for name in ("W1", "b1", "W2", "b2", "input_scale", "output_scale"):
            arr = getattr(self, name)
            layers.append({"name": name, "shape": list(arr.shape),
                           "values": [float(v) for v in arr.ravel()]})
        doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": self.kind,
               "layers": layers}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "HeadModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise ValueError("unsupported model document")
        arrs = {
            layer["name"]: np.asarray(layer["values"], dtype=float).reshape(layer["shape"])
            for layer in doc["layers"]
        }
        return cls(doc["kind"], arrs["W1"], arrs["b1"], arrs["W2"], arrs["b2"],
                   arrs["input_scale"], arrs["output_scale"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "HeadModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# losses


@dataclass
class Batch:
    """Features ``X`` with targets ``y`` (deltas or IoUs) and per-sample weights."""

    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.X))


def batch_loss(model: HeadModel, batch: Batch, beta: float = 1.0, with_grad: bool = True):
    """Mean over the batch of the weighted smooth-L1 loss, and its parameter gradients."""
    n = max(len(batch.X), 1)
    out, cache = model.forward(batch.X)
    if model.kind == "regressor":
        target = batch.y / model.output_scale
        losses, g = per_sample_loss(out, target, np.arange(len(out)), batch.weights, beta)
    else:
        value, g = smooth_l1(out[:, 0] - batch.y, beta)
        losses = batch.weights * value
        g = (batch.weights * g)[:, None]
    loss = float(np.sum(losses)) / n
    if not with_grad:
        return loss, None
    return loss, model.backward(cache, g / n)


def grad_check(model: HeadModel, batch: Batch, eps: float = 1e-5, beta: float = 1.0) -> float:
    """Max over parameters of ``|analytic - central difference| / max(1, |analytic|)``."""
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    _, grads = batch_loss(model, batch, beta)
    probe = model.copy()
    worst = 0.0
    for name in HeadModel.PARAMS:
        p = getattr(probe, name)
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = batch_loss(probe, batch, beta, with_grad=False)
            flat[i] = orig - eps
            down, _ = batch_loss(probe, batch, beta, with_grad=False)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(g[i])))
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    epochs: int = 10
    lr: float = 0.1
    batch_size: int = 128
    seed: int = 0
    weighted: bool = True
    hidden: int = 32
    sigma_feat: float = 0.0
    beta: float = 1.0
    # total SGD steps; overrides ``epochs`` when set
    steps: int | None = None
    delta_stds: tuple[float, ...] = DELTA_STDS
    out_init_std: float = 0.001


@dataclass
class TrainResult:
    model: HeadModel
    # mean minibatch loss per epoch
    trace: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def _sgd(model: HeadModel, X_fn, y: np.ndarray, w: np.ndarray, hyper: TrainHyper,
         rng: np.random.Generator) -> TrainResult:
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    bs = min(hyper.batch_size, n)
    per_epoch = math.ceil(n / bs)
    total = hyper.steps if hyper.steps is not None else hyper.epochs * per_epoch

    def full_loss(m):
        eval_rng = np.random.default_rng(hyper.seed + 7919)
        return batch_loss(m, Batch(X_fn(np.arange(n), eval_rng), y, w), hyper.beta,
                          with_grad=False)[0]

    result = TrainResult(model, initial_loss=full_loss(model))
    step = 0
    while step < total:
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, bs):
            if step >= total:
                break
            idx = order[start:start + bs]
            loss, grads = batch_loss(model, Batch(X_fn(idx, rng), y[idx], w[idx]), hyper.beta)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"{model.kind} loss became non-finite at step {step} (lr={hyper.lr})"
                )
            for name in HeadModel.PARAMS:
                getattr(model, name)[...] -= hyper.lr * grads[name]
            if not model.finite():
                raise TrainingDivergedError(f"{model.kind} parameters non-finite at step {step}")
            epoch_losses.append(loss)
            step += 1
        result.trace.append(float(np.mean(epoch_losses)))
    result.final_loss = full_loss(model)
    return result


def _training_arrays(samples: SampleBatch, scenes: Sequence):
    gt_boxes, app = gather_gts(samples, scenes)
    return samples.boxes, gt_boxes, app


def train_regressor(samples: SampleBatch, scenes: Sequence, cfg: IntervalConfig,
                    hyper: TrainHyper) -> TrainResult:
    """Fit a delta regressor by minibatch SGD on the interval-weighted loss.

    Features are re-extracted (fresh noise) for every minibatch. With
    ``hyper.weighted`` off every interval weight is 1.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    boxes, gt_boxes, app = _training_arrays(samples, scenes)
    targets = encode_deltas_array(boxes, gt_boxes)
    weights = np.asarray(cfg.weights) if hyper.weighted else np.ones(cfg.n_intervals)
    w = weights[samples.interval]
    rng = np.random.default_rng(hyper.seed)
    model = HeadModel.init("regressor", 4 + app.shape[1], hyper.hidden, rng,
                           hyper.out_init_std, hyper.delta_stds)

    def X_fn(idx, r):
        return featurize_array(boxes[idx], gt_boxes[idx], app[idx], hyper.sigma_feat, r)

    return _sgd(model, X_fn, targets, w, hyper, rng)


def train_iou_predictor(samples: SampleBatch, scenes: Sequence, hyper: TrainHyper) -> TrainResult:
    """Fit the IoU head on positives only (IoU >= 0.5)."""
    if len(samples) == 0:
        raise ValueError("empty training set")
    if np.any(samples.iou < 0.5):
        raise ValueError("IoU predictor is trained on positives only (IoU >= 0.5)")
    boxes, gt_boxes, app = _training_arrays(samples, scenes)
    rng = np.random.default_rng(hyper.seed)
    model = HeadModel.init("iou", 4 + app.shape[1], hyper.hidden, rng,
                           hyper.out_init_std, hyper.delta_stds)

    def X_fn(idx, r):
        return featurize_array(boxes[idx], gt_boxes[idx], app[idx], hyper.sigma_feat, r)

    return _sgd(model, X_fn, samples.iou.copy(), np.ones(len(samples)), hyper, rng)


def with_seed(hyper: TrainHyper, seed: int) -> TrainHyper:
    return replace(hyper, seed=seed)
