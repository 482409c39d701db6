"""Segment-wise spatio-temporal binary cross-entropy.

Each future timestep splits the path into occupied and free segments. The
log-likelihood of the matching class is integrated over every segment with
the trapezoid rule and divided by the segment length, so short segments
weigh as much as long ones. Timesteps are combined with a per-step discount
and the step width.

Two routes compute the same number. ``total_loss`` takes any callable
``occ(s, t)`` and loops over segments; ``build_grid`` + ``weighted_bce``
flattens the same quadrature into weighted points for batched training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .graph import OccupancyLabels, complement_segments

MIN_SEGMENT = 1e-9  # meters; shorter segments carry no mass


@dataclass(frozen=True)
class LossConfig:
    resolution: int = 40
    discount: float = 0.99
    horizon: float = 2.4
    num_steps: int = 60
    eps: float = 1e-6

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    def step_weights(self) -> np.ndarray:
        """delta^k * dt for k = 0 .. num_steps - 1."""
        return self.discount ** np.arange(self.num_steps) * self.dt


def trapezoid_weights(resolution: int) -> np.ndarray:
    """Weights of the composite trapezoid rule on [0, 1] with ``resolution`` nodes."""
    w = np.full(resolution, 1.0 / (resolution - 1))
    w[[0, -1]] *= 0.5
    return w


def segment_integral(f: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, resolution: int = 40) -> float:
    width = hi - lo
    if width < MIN_SEGMENT:
        return 0.0
    s = np.linspace(lo, hi, resolution)
    return float(width * np.dot(trapezoid_weights(resolution), np.broadcast_to(f(s), s.shape)))


def timestep_loss(occ: Callable[[np.ndarray], np.ndarray], o_p, o_n, config: LossConfig = LossConfig()):
    """(positive, negative) normalized BCE terms of one timestep."""
    lo_p, hi_p = config.eps, 1.0 - config.eps

    def neg_log(x):
        return -np.log(np.clip(x, lo_p, hi_p))

    def term(segments, transform):
        total = 0.0
        for lo, hi in segments:
            if hi - lo < MIN_SEGMENT:
                continue
            total += segment_integral(lambda s: transform(occ(s)), lo, hi, config.resolution) / (hi - lo)
        return total

    return term(o_p, neg_log), term(o_n, lambda x: neg_log(1.0 - x))


def total_loss(occ: Callable[[np.ndarray, np.ndarray], np.ndarray], labels: OccupancyLabels, config: LossConfig = LossConfig()) -> float:
    if labels.num_steps != config.num_steps:
        raise ValueError(f"labels have {labels.num_steps} steps, config expects {config.num_steps}")
    weights = config.step_weights()
    total = 0.0
    for k, (_, occupied) in enumerate(labels.timesteps):
        t = k * config.dt
        o_p, o_n = complement_segments(occupied, labels.zeta)
        lp, ln = timestep_loss(lambda s: occ(s, np.full_like(s, t)), o_p, o_n, config)
        total += weights[k] * (lp + ln)
    return total


# -- flattened quadrature for batched training --------------------------------------


@dataclass(frozen=True)
class QuadratureGrid:
    """Weighted evaluation points whose BCE sum equals ``total_loss``."""

    s: np.ndarray
    t: np.ndarray
    target: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


def build_grid(labels: OccupancyLabels, config: LossConfig = LossConfig()) -> QuadratureGrid:
    if labels.num_steps != config.num_steps:
        raise ValueError(f"labels have {labels.num_steps} steps, config expects {config.num_steps}")
    nodes = np.linspace(0.0, 1.0, config.resolution)
    unit = trapezoid_weights(config.resolution)
    step_w = config.step_weights()
    s, t, y, w = [], [], [], []
    for k, (_, occupied) in enumerate(labels.timesteps):
        o_p, o_n = complement_segments(occupied, labels.zeta)
        for segments, label in ((o_p, 1.0), (o_n, 0.0)):
            for lo, hi in segments:
                if hi - lo < MIN_SEGMENT:
                    continue
                s.append(lo + (hi - lo) * nodes)
                t.append(np.full(config.resolution, k * config.dt))
                y.append(np.full(config.resolution, label))
                w.append(unit * step_w[k])
    if not s:
        empty = np.zeros(0)
        return QuadratureGrid(empty, empty, empty, empty)
    return QuadratureGrid(*(np.concatenate(a) for a in (s, t, y, w)))


def pad_grids(grids: Sequence[QuadratureGrid]):
    """Stack grids into (B, P) arrays; padding points get zero weight."""
    width = max(len(g) for g in grids)
    out = [np.zeros((len(grids), width)) for _ in range(4)]
    for i, g in enumerate(grids):
        for arr, src in zip(out, (g.s, g.t, g.target, g.weight)):
            arr[i, : len(g)] = src
    return tuple(out)


def weighted_bce(prob: Tensor, target: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Per-row weighted BCE sum of a (B, P) probability tensor."""
    p = prob.clip(eps, 1.0 - eps)
    target = np.asarray(target, dtype=prob.dtype)
    w_pos = np.asarray(weight * target, dtype=prob.dtype)
    w_neg = np.asarray(weight * (1.0 - target), dtype=prob.dtype)
    return -(p.log() * w_pos + (1.0 - p).log() * w_neg).sum(axis=1)
