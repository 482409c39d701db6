"""Virtual-vehicle occupancy decoder and the unconstrained MLP baseline.

A latent state is decoded by an LSTM into ``N`` virtual vehicles. Each one
has a length, a time-windowed existence probability and a Gaussian position
that drifts and diffuses along the path; the predicted occupancy at
``(s, t)`` is the probability that at least one of them covers ``s``.

Parameter vector layout (last axis of ``eta``)::

    0 length [m]   1 existence baseline   2 existence time offset
    3 initial position [m]   4 diffusion [m^2/s]   5 drift velocity [m/s]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Tensor, default_dtype, no_grad, precision, stack

LENGTH, EXIST0, EXIST_TAU, POS0, DIFFUSION, VELOCITY = range(6)
T_MIN = 1e-3  # seconds; keeps the position density finite at t = 0


def default_bounds(zeta: float = 45.0) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([2.0, 0.0, 0.0, -10.0, 0.05, -5.0])
    hi = np.array([12.0, 1.0, 1.0, zeta + 10.0, 10.0, 25.0])
    return lo, hi


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- closed-form building blocks (work on Tensors or arrays) --------------------


def position_pdf(s, t, p0, diffusion, velocity):
    s, t = np.asarray(s, float), np.maximum(np.asarray(t, float), T_MIN)
    var2 = 4.0 * diffusion * t
    return np.exp(-((s - p0 - velocity * t) ** 2) / var2) / np.sqrt(np.pi * var2)


def position_cdf(s, t, p0, diffusion, velocity):
    """Gaussian CDF with mean ``p0 + velocity t`` and variance ``2 diffusion t``."""
    s, t, p0, diffusion, velocity = (_t(x) for x in (s, t, p0, diffusion, velocity))
    t = t.clip(T_MIN, np.inf)
    z = (s - p0 - velocity * t) / ((diffusion * t).sqrt() * 2.0)
    return z.erf() * 0.5 + 0.5


def existence_prob(t_norm, exist0, tau, tau_r: float = 6.0, tau_c: float = 0.7):
    """Baseline existence probability windowed by two shifted sigmoids."""
    t_norm, exist0, tau = _t(t_norm), _t(exist0), _t(tau)
    shift = tau * (1.0 + tau_c)
    left = ((t_norm - shift + tau_c) * tau_r).sigmoid()
    right = ((1.0 - t_norm + shift + tau_c) * tau_r).sigmoid()
    return exist0 * left * right


def footprint(s, t, eta, horizon: float = 2.4, tau_r: float = 6.0, tau_c: float = 0.7):
    """Probability that one virtual vehicle covers ``s`` at time ``t``.

    ``eta[..., k]`` broadcasts against ``s`` and ``t``.
    """
    eta = _t(eta)
    s, t = _t(s), _t(t)
    lam, exist0, tau = eta[..., LENGTH], eta[..., EXIST0], eta[..., EXIST_TAU]
    p0, diff, vel = eta[..., POS0], eta[..., DIFFUSION], eta[..., VELOCITY]
    t_phys = t.clip(T_MIN, np.inf)
    mu = p0 + vel * t_phys
    scale = (diff * t_phys).sqrt() * 2.0
    half = lam * 0.5
    mass = (((s + half - mu) / scale).erf() - ((s - half - mu) / scale).erf()) * 0.5
    return existence_prob(t * (1.0 / horizon), exist0, tau, tau_r, tau_c) * mass


def joint_occupancy(footprints: Tensor, axis: int = -1) -> Tensor:
    """At-least-one union of independent footprints along ``axis``."""
    footprints = _t(footprints)
    return 1.0 - (1.0 - footprints).prod(axis=axis)


# -- learned decoder -----------------------------------------------------------


@dataclass
class DecoderParams:
    weights: dict[str, Tensor]
    latent: int = 32
    hidden: int = 256
    n_virtual: int = 12
    zeta: float = 45.0
    horizon: float = 2.4
    tau_r: float = 6.0
    tau_c: float = 0.7
    eta_min: np.ndarray = field(default_factory=lambda: default_bounds()[0])
    eta_max: np.ndarray = field(default_factory=lambda: default_bounds()[1])

    def __post_init__(self):
        if not np.all(self.eta_min < self.eta_max):
            raise ValueError("eta_min must be below eta_max componentwise")
        if self.tau_r <= 0:
            raise ValueError("tau_r must be positive")

    @classmethod
    def init(
        cls,
        seed: int = 0,
        latent: int = 32,
        hidden: int = 256,
        n_virtual: int = 12,
        zeta: float = 45.0,
        horizon: float = 2.4,
        tau_r: float = 6.0,
        tau_c: float = 0.7,
    ) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        w = {
            "init.w": nn.glorot(rng, latent, 2 * hidden),
            "init.b": nn.bias(2 * hidden),
            "lstm.w_x": nn.glorot(rng, 1, 4 * hidden),
            "lstm.w_h": nn.glorot(rng, hidden, 4 * hidden),
            "lstm.b": nn.bias(4 * hidden),
            "out.w": nn.glorot(rng, hidden, 6),
            "out.b": nn.bias(6),
        }
        lo, hi = default_bounds(zeta)
        return cls(w, latent, hidden, n_virtual, zeta, horizon, tau_r, tau_c, lo, hi)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def decode(z: Tensor, params: DecoderParams) -> Tensor:
    """Virtual-vehicle parameters, shape (batch, n_virtual, 6), inside the bounds."""
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if z.shape[1] != params.latent:
        raise ValueError(f"latent width {z.shape[1]} != {params.latent}")
    H = params.hidden
    state = nn.linear(z, params["init.w"], params["init.b"])
    h, c = state[:, :H], state[:, H:]
    x = Tensor(np.zeros((z.shape[0], 1), dtype=default_dtype()))
    lo = params.eta_min.astype(default_dtype())
    span = (params.eta_max - params.eta_min).astype(default_dtype())
    steps = []
    for _ in range(params.n_virtual):
        h, c = nn.lstm_cell(x, h, c, params["lstm.w_x"], params["lstm.w_h"], params["lstm.b"])
        raw = nn.linear(h, params["out.w"], params["out.b"])
        steps.append(raw.sigmoid() * span + lo)
    return stack(steps, axis=1)


def occupancy(eta: Tensor, s, t, params: DecoderParams) -> Tensor:
    """Joint occupancy on per-sample point sets.

    ``eta`` is (B, N, 6); ``s`` and ``t`` are (B, P). Returns (B, P).
    """
    s = np.asarray(s, dtype=eta.dtype)[..., None]
    t = np.asarray(t, dtype=eta.dtype)[..., None]
    per_vehicle = footprint(Tensor(s), Tensor(t), eta.reshape(eta.shape[0], 1, *eta.shape[1:]),
                            params.horizon, params.tau_r, params.tau_c)
    return joint_occupancy(per_vehicle, axis=-1)


@dataclass
class OccupancyField:
    """Decoded virtual vehicles of one scene, evaluable anywhere on the path."""

    vehicles: np.ndarray  # (N, 6)
    zeta: float = 45.0
    horizon: float = 2.4
    tau_r: float = 6.0
    tau_c: float = 0.7

    def footprints(self, s, t) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)[..., None]
        t = np.asarray(t, dtype=np.float64)[..., None]
        with no_grad(), precision(np.float64):
            return footprint(s, t, self.vehicles.astype(np.float64), self.horizon, self.tau_r, self.tau_c).data

    def __call__(self, s, t) -> np.ndarray:
        s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        return 1.0 - np.prod(1.0 - self.footprints(s, t), axis=-1)

    @classmethod
    def from_decoder(cls, eta: Tensor, params: DecoderParams, index: int = 0) -> "OccupancyField":
        return cls(np.array(eta.data[index], dtype=np.float64), params.zeta, params.horizon, params.tau_r, params.tau_c)


# -- unconstrained baseline ------------------------------------------------------


@dataclass
class NaiveParams:
    weights: dict[str, Tensor]
    latent: int = 32
    hidden: tuple[int, int] = (256, 128)
    zeta: float = 45.0
    horizon: float = 2.4

    @classmethod
    def init(cls, seed: int = 0, latent: int = 32, hidden=(256, 128), zeta: float = 45.0, horizon: float = 2.4) -> "NaiveParams":
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        w = {
            "l1.w": nn.glorot(rng, latent + 2, h1),
            "l1.b": nn.bias(h1),
            "l2.w": nn.glorot(rng, h1, h2),
            "l2.b": nn.bias(h2),
            "out.w": nn.glorot(rng, h2, 1),
            "out.b": nn.bias(1),
        }
        return cls(w, latent, tuple(hidden), zeta, horizon)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def naive_occupancy(z: Tensor, s, t, params: NaiveParams) -> Tensor:
    """MLP on [z, s / zeta, t / horizon] evaluated on (B, P) point sets.

    The first layer is split into its latent and coordinate blocks so the
    latent part is computed once per sample.
    """
    if z.ndim == 1:
        z = z.reshape(1, -1)
    B = z.shape[0]
    s = np.asarray(s, dtype=z.dtype).reshape(B, -1, 1) / params.zeta
    t = np.asarray(t, dtype=z.dtype).reshape(B, -1, 1) / params.horizon
    P = s.shape[1]
    Z = params.latent
    w1 = params["l1.w"]
    per_sample = (z @ w1[:Z] + params["l1.b"]).reshape(B, 1, -1)
    coords = Tensor(np.concatenate([s, t], axis=-1).reshape(B * P, 2)) @ w1[Z:]
    h1 = (coords.reshape(B, P, -1) + per_sample).tanh().reshape(B * P, -1)
    h2 = nn.linear(h1, params["l2.w"], params["l2.b"]).tanh()
    out = nn.linear(h2, params["out.w"], params["out.b"]).sigmoid()
    return out.reshape(B, P)


def naive_decode(z, s, t, params: NaiveParams):
    """Scalar-friendly wrapper: occupancy at broadcast (s, t) for one latent."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
    out = naive_occupancy(z.reshape(1, -1), s.reshape(1, -1), t.reshape(1, -1), params)
    return out.reshape(s.shape) if s.ndim else out.reshape(())
