"""Smooth-L1 and the interval-weighted box regression loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sampler import IntervalConfig


def smooth_l1(x, beta: float = 1.0):
    """Smooth-L1 value and derivative, elementwise.

    ``0.5 * x**2 / beta`` inside ``|x| < beta``, ``|x| - 0.5 * beta`` outside.
    Returns ``(value, grad)`` with the same shape as ``x``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    inner = ax < beta
    value = np.where(inner, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(inner, x / beta, np.sign(x))
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


@dataclass
class LossReport:
    total: float
    per_interval: list[float]
    per_interval_share: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["interval", "loss", "share"])
        for j, (loss, share) in enumerate(zip(self.per_interval, self.per_interval_share)):
            w.writerow([j, repr(loss), repr(share)])
        return buf.getvalue()


def _weights(cfg_or_weights) -> np.ndarray:
    if isinstance(cfg_or_weights, IntervalConfig):
        return np.asarray(cfg_or_weights.weights, dtype=float)
    return np.asarray(cfg_or_weights, dtype=float)


def _check(preds, targets, intervals):
    preds = np.asarray(preds, dtype=float).reshape(-1, 4)
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    intervals = np.asarray(intervals, dtype=np.int64).reshape(-1)
    if not (len(preds) == len(targets) == len(intervals)):
        raise ValueError(
            f"length mismatch: {len(preds)} preds, {len(targets)} targets, "
            f"{len(intervals)} intervals"
        )
    return preds, targets, intervals


def _check_intervals(intervals, n):
    if len(intervals) and (intervals.min() < 0 or intervals.max() >= n):
        raise ValueError(f"interval index outside [0, {n})")


def per_sample_loss(preds, targets, intervals, weights, beta: float = 1.0):
    """Weighted per-sample loss ``w_j * sum_c smooth_l1(pred_c - target_c)`` and its
    gradient with respect to ``preds``."""
    preds, targets, intervals = _check(preds, targets, intervals)
    w = _weights(weights)
    _check_intervals(intervals, len(w))
    w = w[intervals]
    value, grad = smooth_l1(preds - targets, beta)
    return w * value.sum(axis=1), w[:, None] * grad


def weighted_reg_loss(
    preds, targets, intervals, cfg: IntervalConfig | Sequence[float], beta: float = 1.0
) -> LossReport:
    """Sum over samples of ``w_{interval} * smooth_l1`` summed over the 4 deltas.

    No normalisation by sample count is applied.
    """
    preds, targets, intervals = _check(preds, targets, intervals)
    w = _weights(cfg)
    losses, _ = per_sample_loss(preds, targets, intervals, w, beta)
    n = len(w)
    per = [float(np.sum(losses[intervals == j])) for j in range(n)]
    total = float(np.sum(per))
    share = [p / total for p in per] if total > 0 else [0.0] * n
    return LossReport(total, per, share)


def loss_composition(preds, targets, intervals, cfg: IntervalConfig | Sequence[float],
                     beta: float = 1.0) -> list[float]:
    """Share of the weighted regression loss contributed by each IoU interval.

    Pass ``preds=None`` for an untrained head whose outputs sit at zero.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    if len(targets) == 0:
        raise ValueError("empty batch")
    if preds is None:
        preds = np.zeros_like(targets)
    return weighted_reg_loss(preds, targets, intervals, cfg, beta).per_interval_share
