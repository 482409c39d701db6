"""Registry of gradient and numerical-oracle checks behind ``occrep gradcheck``.

Each check returns its worst error; the suite compares it with the check's
tolerance. Gradient checks compare reverse mode with central differences in
64-bit arithmetic.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, check_gradient
from .decoder import DecoderParams, NaiveParams, decode, default_bounds, footprint, joint_occupancy, naive_occupancy, occupancy, position_cdf, position_pdf
from .encoder import EncoderParams, batch_graphs, encode_batch
from .graph import Sample, make_sample
from .loss import LossConfig, build_grid, pad_grids, weighted_bce
from .sim import VehicleState, generate_network, kinematic_trace


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    run: Callable[[], float]
    group: str = "gradient"


REGISTRY: dict[str, Check] = {}


def register(name: str, tolerance: float, group: str = "gradient"):
    def deco(fn):
        REGISTRY[name] = Check(name, tolerance, fn, group)
        return fn

    return deco


# -- toy data ----------------------------------------------------------------------


def toy_sample(frames: int = 60) -> Sample:
    """Three-lanelet straight road, an ego and one leading vehicle."""
    net = generate_network(1, "straight")
    first = net.ids[0]
    vehicles = [
        VehicleState(1, first, 5.0, 8.0, 0.0, 4.5, 1.8),
        VehicleState(2, first, 22.0, 5.0, 0.0, 5.0, 1.9),
    ]
    trace = kinematic_trace(net, vehicles, frames)
    return make_sample(trace, 0, 1, route_seed=0)


# -- primitive checks --------------------------------------------------------------------


def _scalarize(fn, rng):
    """Random linear functional of ``fn``'s output, fixed on first use."""
    weights = {}

    def f(x):
        out = fn(x)
        if "w" not in weights:
            weights["w"] = rng.normal(size=out.shape)
        return (out * weights["w"]).sum()

    return f


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[np.ndarray, Callable]]:
    """name -> (input, tensor function) covering every differentiable primitive."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    far = np.where(rng.random((3, 4)) < 0.5, rng.uniform(-0.9, 0.9, (3, 4)), rng.choice([-1, 1], (3, 4)) * rng.uniform(2, 3, (3, 4)))
    B, P, M = (Tensor(x) for x in (b, pos, rng.normal(size=(4, 2))))
    mask = rng.random((3, 4)) < 0.5
    # max-type ops: entries at least 0.1 apart so no probe crosses a kink
    spread = rng.permutation(18).reshape(6, 3) * 0.1 + rng.uniform(0, 0.02, (6, 3))
    ids = np.array([0, 0, 1, 3, 3, 3])
    return {
        "add": (a, lambda x: x + B),
        "add_broadcast": (a[:1], lambda x: B + x),
        "sub": (a, lambda x: B - x),
        "mul": (a, lambda x: x * B),
        "mul_broadcast": (a[0], lambda x: B * x),
        "div": (pos, lambda x: B / x),
        "div_numerator": (a, lambda x: x / P),
        "neg": (a, lambda x: -x),
        "pow": (pos, lambda x: x**1.7),
        "matmul": (a, lambda x: x @ M),
        "matmul_rhs": (rng.normal(size=(4, 2)), lambda x: B @ x),
        "sum": (a, lambda x: x.sum(axis=0)),
        "mean": (a, lambda x: x.mean(axis=1, keepdims=True)),
        "max": (spread[:3], lambda x: x.max(axis=1)),
        "max_all": (spread, lambda x: x.max()),
        "prod": (a, lambda x: x.prod(axis=1)),
        "exp": (a, lambda x: x.exp()),
        "log": (pos, lambda x: x.log()),
        "sqrt": (pos, lambda x: x.sqrt()),
        "tanh": (a, lambda x: x.tanh()),
        "sigmoid": (a, lambda x: x.sigmoid()),
        "erf": (a, lambda x: x.erf()),
        "clip": (far, lambda x: x.clip(-1.5, 1.5)),
        "softmax": (a, lambda x: x.softmax(axis=1)),
        "reshape_transpose": (a, lambda x: x.reshape(4, 3).T),
        "slice": (a, lambda x: x[1:, ::2]),
        "take": (a, lambda x: x.take([2, 0, 2, 1], axis=0)),
        "concat": (a, lambda x: ad.concat([x, B, x], axis=1)),
        "stack": (a, lambda x: ad.stack([x, B], axis=0)),
        "broadcast_to": (a[:1], lambda x: x.broadcast_to((3, 4))),
        "expand_dims": (a, lambda x: x.expand_dims(1) * 2.0),
        "where": (a, lambda x: ad.where(mask, x, B)),
        "segment_max": (spread, lambda x: ad.segment_max(x, ids, 5)),
        "segment_sum": (rng.normal(size=(6, 3)), lambda x: ad.segment_sum(x, ids, 5)),
    }


def lstm_cases(rng: np.random.Generator, hidden: int = 5, inputs: int = 3, batch: int = 2):
    arrays = {
        "x": rng.normal(size=(batch, inputs)),
        "h": rng.normal(size=(batch, hidden)),
        "c": rng.normal(size=(batch, hidden)),
        "w_x": rng.normal(size=(inputs, 4 * hidden)) * 0.5,
        "w_h": rng.normal(size=(hidden, 4 * hidden)) * 0.5,
        "b": rng.normal(size=(1, 4 * hidden)) * 0.5,
    }
    cases = {}
    for name in arrays:
        def fn(x, name=name):
            args = {k: (x if k == name else Tensor(v)) for k, v in arrays.items()}
            h, c = nn.lstm_cell(args["x"], args["h"], args["c"], args["w_x"], args["w_h"], args["b"])
            return ad.concat([h, c], axis=1)

        cases[f"lstm_cell.{name}"] = (arrays[name], fn)
    return cases


def primitive_error(seeds=range(3), h: float = 1e-4) -> dict[str, float]:
    out: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = dict(primitive_cases(rng))
        cases.update(lstm_cases(rng))
        for name, (x0, fn) in cases.items():
            err = check_gradient(_scalarize(fn, rng), x0, h)
            out[name] = max(out.get(name, 0.0), err)
    return out


@register("primitives", 1e-4)
def _primitives() -> float:
    return max(primitive_error().values())


# -- decoder checks ----------------------------------------------------------------------


def random_eta(rng: np.random.Generator, shape, zeta: float = 45.0) -> np.ndarray:
    lo, hi = default_bounds(zeta)
    return lo + (hi - lo) * rng.uniform(0.05, 0.95, size=tuple(shape) + (6,))


def footprint_error(points: int = 100, seed: int = 0, h: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 45, points)
    t = rng.uniform(0, 2.4, points)
    eta = random_eta(rng, (points,))
    return check_gradient(_scalarize(lambda x: footprint(Tensor(s), Tensor(t), x), rng), eta, h)


def joint_error(points: int = 40, n: int = 3, seed: int = 1, h: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 45, (points, 1))
    t = rng.uniform(0, 2.4, (points, 1))
    # centre the vehicles near the probes so every footprint carries gradient
    eta = random_eta(rng, (points, n))
    eta[..., 3] = s + rng.normal(0, 3, (points, n))
    return check_gradient(_scalarize(lambda x: joint_occupancy(footprint(Tensor(s), Tensor(t), x)), rng), eta, h)


@register("footprint", 1e-4)
def _footprint() -> float:
    return max(footprint_error(seed=k) for k in range(2))


@register("joint_occupancy", 1e-4)
def _joint() -> float:
    return joint_error()


# -- parameter checks --------------------------------------------------------------------


def parameter_error(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 3e-4,
    per_tensor: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Worst relative error per parameter tensor; ``per_tensor`` probes a random subset."""
    rng = np.random.default_rng(seed)
    base = {k: np.asarray(v.data, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        def f(x, name=name):
            return loss_fn({k: (x if k == name else Tensor(v)) for k, v in base.items()})

        idx = None
        if per_tensor is not None and arr.size > per_tensor:
            idx = rng.choice(arr.size, per_tensor, replace=False)
        out[name] = check_gradient(f, arr, h, idx)
    return out


def model_loss_fn(sample: Sample, encoder: EncoderParams, decoder, config: LossConfig = LossConfig()):
    """Parameters (prefixed ``encoder.`` / ``decoder.``) -> total loss of one sample."""
    grid = build_grid(sample.labels, config)
    s, t, y, w = pad_grids([grid])

    def loss(weights: Mapping[str, Tensor]) -> Tensor:
        enc = replace(encoder, weights={k[8:]: v for k, v in weights.items() if k.startswith("encoder.")})
        dec = replace(decoder, weights={k[8:]: v for k, v in weights.items() if k.startswith("decoder.")})
        z = encode_batch(batch_graphs([(sample.graph, sample.context)]), enc)
        if isinstance(dec, DecoderParams):
            prob = occupancy(decode(z, dec), s, t, dec)
        else:
            prob = naive_occupancy(z, s, t, dec)
        return weighted_bce(prob, y, w, config.eps).sum()

    params = {f"encoder.{k}": v for k, v in encoder.weights.items()}
    params.update({f"decoder.{k}": v for k, v in decoder.weights.items()})
    return loss, params


def small_models(seed: int = 0, hidden: int = 8, latent: int = 4, layers: int = 4, n_virtual: int = 3):
    enc = EncoderParams.init(seed, hidden, latent, layers)
    dec = DecoderParams.init(seed + 1, latent, hidden, n_virtual)
    naive = NaiveParams.init(seed + 1, latent, (hidden, hidden // 2))
    return enc, dec, naive


@register("loss_all_params_small", 1e-3)
def _loss_small() -> float:
    enc, dec, _ = small_models()
    loss, params = model_loss_fn(toy_sample(), enc, dec)
    return max(parameter_error(loss, params).values())


@register("loss_full_size_subset", 1e-3)
def _loss_full() -> float:
    enc, dec = EncoderParams.init(0), DecoderParams.init(1)
    loss, params = model_loss_fn(toy_sample(), enc, dec)
    return max(parameter_error(loss, params, per_tensor=2).values())


@register("naive_all_params_small", 1e-3)
def _naive_small() -> float:
    enc, _, naive = small_models()
    loss, params = model_loss_fn(toy_sample(), enc, naive)
    return max(parameter_error(loss, params).values())


# -- value oracles -------------------------------------------------------------------------


@register("erf_vs_stdlib", 1e-7, group="oracle")
def _erf_values() -> float:
    x = np.linspace(-6, 6, 2001)
    ref = np.array([math.erf(v) for v in x])
    with ad.precision(np.float64):
        return float(np.max(np.abs(Tensor(x).erf().data - ref)))


@register("cdf_vs_quadrature", 1e-6, group="oracle")
def _cdf_quadrature() -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        s, t, p0, d, v, lam = rng.uniform(0, 45), rng.uniform(0.01, 2.4), rng.uniform(-10, 55), rng.uniform(0.05, 10), rng.uniform(-5, 25), rng.uniform(2, 12)
        grid = np.linspace(s - lam / 2, s + lam / 2, 100_001)
        quad = np.trapezoid(position_pdf(grid, t, p0, d, v), grid)
        with ad.precision(np.float64):
            diff = position_cdf(s + lam / 2, t, p0, d, v).data - position_cdf(s - lam / 2, t, p0, d, v).data
        worst = max(worst, abs(float(diff) - quad))
    return worst


# -- runner -----------------------------------------------------------------------------------


def run_suite(names=None) -> dict:
    selected = [REGISTRY[n] for n in (names or REGISTRY)]
    rows = []
    for check in selected:
        start = time.time()
        try:
            err = float(check.run())
            passed = bool(err <= check.tolerance)
            note = None
        except Exception as exc:  # a crashing check is a failing check
            err, passed, note = float("inf"), False, f"{type(exc).__name__}: {exc}"
        rows.append({
            "name": check.name, "group": check.group, "tolerance": check.tolerance,
            "max_error": err, "passed": passed, "seconds": round(time.time() - start, 3),
            **({"error": note} if note else {}),
        })
    return {"passed": all(r["passed"] for r in rows), "checks": rows}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2)
