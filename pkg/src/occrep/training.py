"""Joint training of encoder and decoder, corpus building, checkpoints, metrics."""

from __future__ import annotations

import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import NumericError, Tensor, no_grad
from .decoder import DecoderParams, NaiveParams, decode, naive_occupancy, occupancy
from .encoder import EncoderParams, batch_graphs, encode_batch
from .graph import Sample, ground_truth_occupancy, make_sample, sample_anchors
from .lanes import plan_route
from .loss import LossConfig, QuadratureGrid, build_grid, pad_grids, weighted_bce
from .sim import TEMPLATES, ScenarioTrace, SpawnConfig, generate_network, simulate

log = logging.getLogger(__name__)

MODEL_KINDS = ("ours", "naive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    split: float = 0.9
    context_resample: bool = True
    model: str = "both"  # ours | naive | both
    hidden: int = 256
    latent: int = 32
    layers: int = 4
    n_virtual: int = 12
    naive_hidden: tuple[int, int] = (256, 128)
    zeta: float = 45.0
    tau_r: float = 6.0
    tau_c: float = 0.7
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.model not in MODEL_KINDS + ("both",):
            raise ValueError(f"unknown model {self.model!r}")

    @property
    def kinds(self) -> tuple[str, ...]:
        return MODEL_KINDS if self.model == "both" else (self.model,)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["naive_hidden"] = list(self.naive_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and not isinstance(d["loss"], LossConfig):
            d["loss"] = LossConfig(**d["loss"])
        if "naive_hidden" in d:
            d["naive_hidden"] = tuple(int(x) for x in d["naive_hidden"])
        return cls(**d)


# -- models ----------------------------------------------------------------------


@dataclass
class Model:
    kind: str
    encoder: EncoderParams
    decoder: DecoderParams | NaiveParams

    @classmethod
    def init(cls, kind: str, config: TrainConfig) -> "Model":
        enc = EncoderParams.init(config.seed, config.hidden, config.latent, config.layers)
        if kind == "ours":
            dec = DecoderParams.init(
                config.seed + 1, config.latent, config.hidden, config.n_virtual,
                config.zeta, config.loss.horizon, config.tau_r, config.tau_c,
            )
        else:
            dec = NaiveParams.init(config.seed + 1, config.latent, config.naive_hidden, config.zeta, config.loss.horizon)
        return cls(kind, enc, dec)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.weights.items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.weights.items()})
        return out

    def occupancy(self, z: Tensor, s: np.ndarray, t: np.ndarray) -> Tensor:
        if self.kind == "ours":
            return occupancy(decode(z, self.decoder), s, t, self.decoder)
        return naive_occupancy(z, s, t, self.decoder)

    def losses(self, samples: Sequence[Sample], grids: Sequence[QuadratureGrid], eps: float) -> Tensor:
        """Per-sample total loss, shape (B,)."""
        z = encode_batch(batch_graphs([(x.graph, x.context) for x in samples]), self.encoder)
        s, t, y, w = pad_grids(grids)
        return weighted_bce(self.occupancy(z, s, t), y, w, eps)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


# -- data -------------------------------------------------------------------------


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("OCCREP_THREADS", "1")))
    except ValueError:
        return 1


def _one_trace(args) -> ScenarioTrace:
    scenario_id, template, seed, duration, dt, spawn = args
    network = generate_network(seed, template)
    return simulate(network, seed, duration, dt, spawn, scenario_id)


def generate_traces(
    count: int,
    seed: int = 0,
    templates: Sequence[str] = TEMPLATES,
    duration: float = 20.0,
    dt: float = 0.04,
    spawn: SpawnConfig = SpawnConfig(),
) -> list[ScenarioTrace]:
    """``count`` scenarios cycling through ``templates``; scenario i uses seed ``seed + i``."""
    jobs = [(i, templates[i % len(templates)], seed + i, duration, dt, spawn) for i in range(count)]
    workers = min(_workers(), count)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_one_trace, jobs))
    return [_one_trace(j) for j in jobs]


def build_samples(
    traces: Sequence[ScenarioTrace],
    anchors_per_scenario: int = 20,
    seed: int = 0,
    zeta: float = 45.0,
    T: float = 2.4,
    T_D: int = 60,
) -> list[Sample]:
    out = []
    for trace in traces:
        rng = np.random.default_rng([seed, trace.scenario_id])
        for a in sample_anchors(trace, anchors_per_scenario, rng, zeta, T, T_D):
            out.append(make_sample(trace, a.frame, a.ego_id, int(rng.integers(2**32)), zeta, T, T_D))
    return out


def split_by_scenario(samples: Sequence[Sample], split: float = 0.9, seed: int = 0):
    """Train/test partition with disjoint scenario ids."""
    ids = sorted({s.anchor.scenario_id for s in samples})
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(split * len(ids)))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = {ids[i] for i in order[:n_train]}
    train = [s for s in samples if s.anchor.scenario_id in train_ids]
    test = [s for s in samples if s.anchor.scenario_id not in train_ids]
    return train, test


def resample_context(trace: ScenarioTrace, sample: Sample, seed: int, zeta: float, loss: LossConfig) -> Sample:
    """Same scene, fresh random ego route and the matching labels."""
    a = sample.anchor
    ego = next(v for v in trace.vehicles(a.frame) if v.id == a.ego_id)
    context = plan_route(trace.network, ego.lanelet_id, ego.s_on_lanelet, zeta, seed)
    labels = ground_truth_occupancy(trace, context, trace.frames[a.frame][0], loss.horizon, loss.num_steps, a.ego_id)
    return Sample(sample.graph, context, labels, a)


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"OCRP"
VERSION = 1
TAG_F32, TAG_JSON = 0, 1


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", VERSION)]
        records = [(k, TAG_F32, np.ascontiguousarray(v, dtype="<f4")) for k, v in sorted(self.arrays.items())]
        for name, obj in (("__config__", self.config), ("__metadata__", self.metadata)):
            blob = json.dumps(obj, sort_keys=True).encode()
            records.append((name, TAG_JSON, np.frombuffer(blob, dtype=np.uint8)))
        for name, tag, arr in records:
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos, arrays, blobs = 8, {}, {}
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if tag == TAG_F32:
                arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
                pos += 4 * count
            elif tag == TAG_JSON:
                blobs[name] = json.loads(data[pos : pos + count].decode())
                pos += count
            else:
                raise ValueError(f"unknown dtype tag {tag} for {name}")
        return cls(arrays, blobs.get("__config__", {}), blobs.get("__metadata__", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def kinds(self) -> list[str]:
        return [k for k in MODEL_KINDS if any(n.startswith(k + ".") for n in self.arrays)]

    def model(self, kind: str = "ours") -> Model:
        if kind not in self.kinds():
            raise KeyError(f"checkpoint has no {kind!r} section")
        m = Model.init(kind, self.train_config)
        for name, p in m.parameters().items():
            p.data = self.arrays[f"{kind}.{name}"].copy()
        return m


def make_checkpoint(models: Mapping[str, Model], config: TrainConfig, metadata: dict | None = None) -> Checkpoint:
    arrays = {f"{kind}.{name}": p.data.astype(np.float32) for kind, m in models.items() for name, p in m.parameters().items()}
    return Checkpoint(arrays, config.to_dict(), metadata or {})


# -- training loop --------------------------------------------------------------------


def _batched_losses(model: Model, samples: Sequence[Sample], config: TrainConfig) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(samples), config.batch_size):
            chunk = samples[i : i + config.batch_size]
            grids = [build_grid(s.labels, config.loss) for s in chunk]
            out.append(model.losses(chunk, grids, config.loss.eps).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def train(
    dataset: Sequence[Sample],
    config: TrainConfig = TrainConfig(),
    traces: Mapping[int, ScenarioTrace] | None = None,
    test_set: Sequence[Sample] | None = None,
) -> Checkpoint:
    """Mini-batch Adam on the mean total loss.

    Without ``test_set`` the dataset is split by scenario id. Context
    resampling needs the source traces; samples whose trace is not in
    ``traces`` keep their original route.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if test_set is None:
        train_set, test_set = split_by_scenario(dataset, config.split, config.seed)
        if not train_set:
            train_set, test_set = list(dataset), []
    else:
        train_set = list(dataset)
    traces = traces or {}
    models = {kind: Model.init(kind, config) for kind in config.kinds}
    states = {kind: AdamState() for kind in models}
    curves = {kind: {"train": [], "test": []} for kind in models}
    rng = np.random.default_rng([config.seed, 7])
    current = list(train_set)
    for epoch in range(config.epochs):
        if config.context_resample and epoch > 0:
            seeds = rng.integers(2**32, size=len(train_set))
            current = [
                resample_context(traces[s.anchor.scenario_id], s, int(seed), config.zeta, config.loss)
                if s.anchor is not None and s.anchor.scenario_id in traces else s
                for s, seed in zip(train_set, seeds)
            ]
        order = rng.permutation(len(current))
        totals = {kind: 0.0 for kind in models}
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [current[i] for i in order[start : start + config.batch_size]]
            grids = [build_grid(s.labels, config.loss) for s in chunk]
            for kind, model in models.items():
                params = model.parameters()
                for p in params.values():
                    p.requires_grad = True
                    p.grad = None
                try:
                    per_sample = model.losses(chunk, grids, config.loss.eps)
                    loss = per_sample.sum() * (1.0 / len(chunk))
                    loss.backward()
                    adam_step(params, {k: p.grad for k, p in params.items()}, states[kind],
                              config.learning_rate, config.beta1, config.beta2, config.adam_eps)
                except NumericError:
                    log.error("numeric failure: model=%s epoch=%d step=%d", kind, epoch, step)
                    raise
                totals[kind] += float(per_sample.data.sum())
        for kind, model in models.items():
            curves[kind]["train"].append(totals[kind] / len(current))
            if test_set:
                curves[kind]["test"].append(float(_batched_losses(model, test_set, config).mean()))
            log.info("epoch %d %s train %.5f test %s", epoch, kind, curves[kind]["train"][-1],
                     curves[kind]["test"][-1] if test_set else "-")
    metadata = {
        "epochs": config.epochs,
        "curves": curves,
        "final_train_loss": {k: float(_batched_losses(m, train_set, config).mean()) for k, m in models.items()},
        "train_scenarios": sorted({s.anchor.scenario_id for s in train_set if s.anchor}),
        "test_scenarios": sorted({s.anchor.scenario_id for s in test_set if s.anchor}),
    }
    return make_checkpoint(models, config, metadata)


# -- evaluation -----------------------------------------------------------------------


def evaluate(checkpoint: Checkpoint, dataset: Sequence[Sample], buckets: int = 6, bins: int = 10) -> dict:
    """Mean loss, per-horizon-bucket loss and probability calibration for each model."""
    config = checkpoint.train_config
    result = {}
    for kind in checkpoint.kinds():
        model = checkpoint.model(kind)
        bucket_loss = np.zeros(buckets)
        cal_sum, cal_hit, cal_n = np.zeros(bins), np.zeros(bins), np.zeros(bins)
        losses = []
        with no_grad():
            for i in range(0, len(dataset), config.batch_size):
                chunk = dataset[i : i + config.batch_size]
                grids = [build_grid(s.labels, config.loss) for s in chunk]
                z = encode_batch(batch_graphs([(x.graph, x.context) for x in chunk]), model.encoder)
                s, t, y, w = pad_grids(grids)
                prob = model.occupancy(z, s, t)
                losses.append(weighted_bce(prob, y, w, config.loss.eps).data.astype(np.float64))
                p = np.clip(prob.data.astype(np.float64), config.loss.eps, 1 - config.loss.eps)
                point_loss = -w * (y * np.log(p) + (1 - y) * np.log(1 - p))
                step = np.rint(t / config.loss.dt).astype(int)
                bucket = np.minimum(step * buckets // config.loss.num_steps, buckets - 1)
                bucket_loss += np.bincount(bucket.ravel(), point_loss.ravel(), buckets)
                real = w > 0
                b = np.minimum((p[real] * bins).astype(int), bins - 1)
                cal_sum += np.bincount(b, p[real], bins)
                cal_hit += np.bincount(b, y[real], bins)
                cal_n += np.bincount(b, minlength=bins)
        all_losses = np.concatenate(losses) if losses else np.zeros(0)
        n = max(len(dataset), 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            result[kind] = {
                "mean_loss": float(all_losses.mean()) if len(all_losses) else float("nan"),
                "bucket_loss": (bucket_loss / n).tolist(),
                "calibration": [
                    {"bin": [j / bins, (j + 1) / bins], "count": int(cal_n[j]),
                     "mean_pred": float(cal_sum[j] / cal_n[j]) if cal_n[j] else None,
                     "frequency": float(cal_hit[j] / cal_n[j]) if cal_n[j] else None}
                    for j in range(bins)
                ],
            }
    return result
