"""``occrep`` command line: gen, extract, train, eval, predict, rollout, gradcheck.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error (including
failed gradient checks).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("occrep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- manifests -------------------------------------------------------------------


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict
    inputs: list[str]
    outputs: list[str]
    versions: dict = dataclasses.field(default_factory=dict)
    wall_clock: float = 0.0

    def write(self, path: Path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        import numpy
        import scipy

        self.versions = {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__}
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str))
        os.replace(tmp, path)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- flat key=value configs --------------------------------------------------------------


def flatten(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    if isinstance(like, (tuple, list)):
        kind = type(like[0]) if like else float
        return tuple(kind(x) for x in text.split(",") if x.strip())
    try:
        return type(like)(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse {text!r} as {type(like).__name__}") from exc


def apply_overrides(obj, pairs: dict[str, str]):
    """Copy of dataclass ``obj`` with dotted-key string overrides applied."""
    defaults = flatten(obj)
    unknown = sorted(set(pairs) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    nested: dict[str, dict[str, str]] = {}
    direct = {}
    for key, text in pairs.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = text
        else:
            direct[key] = _coerce(text, defaults[key])
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(obj, head), sub)
    try:
        return dataclasses.replace(obj, **direct)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def render_flat(obj) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(obj).items())


def _resolve(base, config_file: str | None, sets: list[str]):
    pairs = parse_flat(Path(config_file).read_text()) if config_file else {}
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return apply_overrides(base, pairs)


# -- data loading -------------------------------------------------------------------------


def _traces_in(path: Path):
    from .sim import ScenarioTrace

    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    return [ScenarioTrace.load(f) for f in files]


def _samples_in(path: Path):
    from .graph import Sample

    files = sorted(p for p in path.glob("*.json") if not p.name.endswith("manifest.json"))
    return [Sample.load(f) for f in files]


# -- subcommands ----------------------------------------------------------------------------


def cmd_gen(args) -> dict:
    from .sim import TEMPLATES, SpawnConfig
    from .training import generate_traces

    if args.count < 1:
        raise UsageError("--count must be positive")
    templates = TEMPLATES if args.template == "mixed" else (args.template,)
    spawn = SpawnConfig(rate=args.spawn_rate)
    traces = generate_traces(args.count, args.seed, templates, args.duration, args.dt, spawn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for tr in traces:
        f = out / f"scenario_{tr.scenario_id:05d}.jsonl"
        tr.save(f)
        files.append(str(f))
    return {"config": {"template": args.template, "count": args.count, "duration": args.duration, "dt": args.dt,
                       "spawn_rate": args.spawn_rate},
            "seeds": {"root": args.seed}, "inputs": [], "outputs": files, "manifest": out}


def cmd_extract(args) -> dict:
    from .training import build_samples

    traces = _traces_in(Path(args.trace))
    samples = build_samples(traces, args.anchors, args.seed, args.zeta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for s in samples:
        a = s.anchor
        f = out / f"sample_{a.scenario_id:05d}_{a.frame:05d}_{a.ego_id:04d}.json"
        s.save(f)
        files.append(str(f))
    return {"config": {"anchors": args.anchors, "zeta": args.zeta}, "seeds": {"root": args.seed},
            "inputs": [args.trace], "outputs": files, "manifest": out}


def _train_config(args):
    from .training import TrainConfig

    return _resolve(TrainConfig(), args.config, args.set)


def cmd_train(args) -> dict:
    from .training import build_samples, train

    config = _train_config(args)
    if args.print_config:
        sys.stdout.write(render_flat(config))
        return {}
    if not args.data or not args.out:
        raise UsageError("train needs --data and --out")
    data = Path(args.data)
    if not data.exists():
        raise FileNotFoundError(data)
    traces = _traces_in(data) if data.is_dir() else []
    if args.traces:
        traces = _traces_in(Path(args.traces))
    samples = _samples_in(data) if data.is_dir() else []
    if not samples:
        samples = build_samples(traces, seed=config.seed, zeta=config.zeta,
                                T=config.loss.horizon, T_D=config.loss.num_steps)
    if not samples:
        raise ValueError(f"no samples found under {data}")
    ckpt = train(samples, config, {t.scenario_id: t for t in traces})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    return {"config": flatten(config), "seeds": {"root": config.seed}, "inputs": [args.data],
            "outputs": [str(out)], "manifest": out}


def cmd_eval(args) -> dict:
    from .training import Checkpoint, evaluate

    ckpt = Checkpoint.load(args.ckpt)
    data = Path(args.data)
    samples = _samples_in(data)
    if not samples:
        from .training import build_samples

        cfg = ckpt.train_config
        samples = build_samples(_traces_in(data), seed=cfg.seed, zeta=cfg.zeta)
    metrics = evaluate(ckpt, samples)
    text = json.dumps(metrics, indent=2)
    outputs = []
    if args.json:
        Path(args.json).write_text(text)
        outputs.append(args.json)
    else:
        sys.stdout.write(text + "\n")
    return {"config": {}, "seeds": {}, "inputs": [args.ckpt, args.data], "outputs": outputs,
            "manifest": Path(args.json) if args.json else None}


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        ns, nt = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"grid must look like 200x60, got {text!r}") from exc
    if ns < 1 or nt < 1:
        raise UsageError("grid dimensions must be positive")
    return ns, nt


def occupancy_grid(ckpt, sample, ns: int, nt: int, kind: str = "ours"):
    """(s values, t values, occupancy[t, s]) for one sample."""
    from .autodiff import no_grad
    from .encoder import batch_graphs, encode_batch

    model = ckpt.model(kind)
    cfg = ckpt.train_config
    zeta, horizon = sample.context.length, cfg.loss.horizon
    s = np.linspace(0.0, zeta, ns)
    t = np.arange(nt) * horizon / nt
    S, T = np.meshgrid(s, t)
    with no_grad():
        z = encode_batch(batch_graphs([(sample.graph, sample.context)]), model.encoder)
        occ = model.occupancy(z, S.reshape(1, -1), T.reshape(1, -1)).data.reshape(nt, ns)
    return s, t, occ.astype(np.float64)


def render_svg(s: np.ndarray, t: np.ndarray, occ: np.ndarray, slices: int = 6, width: int = 640, height: int = 320) -> str:
    """Line plot: s on the horizontal axis, one polyline per selected time slice."""
    pad = 40
    pick = np.unique(np.linspace(0, len(t) - 1, min(slices, len(t))).round().astype(int))
    span = max(s[-1] - s[0], 1e-9)
    x = pad + (s - s[0]) / span * (width - 2 * pad)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">s [m] (0 to {s[-1]:.1f})</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">occupancy</text>',
    ]
    for n, k in enumerate(pick):
        y = height - pad - np.clip(occ[k], 0, 1) * (height - 2 * pad)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
        shade = int(200 * n / max(len(pick) - 1, 1))
        color = f"rgb({shade},{60},{255 - shade})"
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"><title>t={t[k]:.2f}s</title></polyline>')
        lines.append(f'<text x="{width - pad + 4}" y="{pad + 14 * (n + 1)}" font-size="10" fill="{color}">t={t[k]:.2f}s</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_predict(args) -> dict:
    from .graph import Sample
    from .training import Checkpoint

    ns, nt = _parse_grid(args.grid)
    ckpt = Checkpoint.load(args.ckpt)
    sample = Sample.load(args.sample)
    s, t, occ = occupancy_grid(ckpt, sample, ns, nt, args.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ["s,t,occupancy"]
    for k in range(nt):
        rows.extend(f"{s[j]:.6f},{t[k]:.6f},{occ[k, j]:.8f}" for j in range(ns))
    out.write_text("\n".join(rows) + "\n")
    svg = Path(args.svg) if args.svg else out.with_suffix(".svg")
    svg.write_text(render_svg(s, t, occ))
    return {"config": {"grid": [ns, nt], "model": args.model}, "seeds": {}, "inputs": [args.ckpt, args.sample],
            "outputs": [str(out), str(svg)], "manifest": out}


def cmd_rollout(args) -> dict:
    from .env import EnvConfig, ReplayEnv, default_ego, make_policy, run_episode
    from .sim import ScenarioTrace
    from .training import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    trace = ScenarioTrace.load(args.trace)
    config = _resolve(EnvConfig(route_seed=args.seed), args.config, args.set)
    script = None
    if args.policy.startswith("script:"):
        text = Path(args.policy.split(":", 1)[1]).read_text()
        script = json.loads(text) if text.lstrip().startswith("[") else [float(x) for x in text.split()]
    try:
        policy = make_policy("script" if script is not None else args.policy, script)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ego = args.ego if args.ego is not None else default_ego(trace, args.frame, config)
    if ego is None:
        raise ValueError("no vehicle in the start frame has room for the route")
    env = ReplayEnv(trace, ckpt.model("ours"), config, ego_id=ego, start_frame=args.frame)
    steps = run_episode(env, policy)
    episode = {"ego_id": ego, "start_frame": args.frame, "route": list(env.route.route),
               "return": float(sum(s["reward"] for s in steps)),
               "reason": env.state.reason, "steps": steps}
    text = json.dumps(episode, indent=2)
    if args.json:
        Path(args.json).write_text(text)
    else:
        sys.stdout.write(text + "\n")
    return {"config": {k: _format(v) for k, v in flatten(config).items()}, "seeds": {"route": args.seed},
            "inputs": [args.ckpt, args.trace], "outputs": [args.json] if args.json else [],
            "manifest": Path(args.json) if args.json else None}


def cmd_gradcheck(args) -> dict:
    from . import gradcheck

    names = args.only or None
    if names:
        missing = [n for n in names if n not in gradcheck.REGISTRY]
        if missing:
            raise UsageError(f"unknown checks: {', '.join(missing)}")
    report = gradcheck.run_suite(names)
    text = gradcheck.report_json(report)
    if args.json:
        Path(args.json).write_text(text)
    for row in report["checks"]:
        flag = "PASS" if row["passed"] else "FAIL"
        print(f"{flag} {row['name']}: {row['max_error']:.3e} (tol {row['tolerance']:.0e}, {row['seconds']:.1f}s)")
    if not report["passed"]:
        raise NumericError("gradient suite failed")
    return {"config": {"only": names}, "seeds": {}, "inputs": [], "outputs": [args.json] if args.json else [],
            "manifest": Path(args.json) if args.json else None}


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .sim import TEMPLATES

    p = _Parser(prog="occrep", description="Ego-conditioned traffic scene representations via occupancy decoding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate networks and simulate traffic traces")
    g.add_argument("--template", default="mixed", choices=TEMPLATES + ("mixed",))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--duration", type=float, default=20.0)
    g.add_argument("--dt", type=float, default=0.04)
    g.add_argument("--spawn-rate", type=float, default=0.3)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    e = sub.add_parser("extract", help="sample anchors from traces and write training samples")
    e.add_argument("--trace", required=True, help="trace file or directory of .jsonl traces")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--anchors", type=int, default=20)
    e.add_argument("--zeta", type=float, default=45.0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_extract)

    t = sub.add_parser("train", help="train the encoder with the constrained and/or naive decoder")
    t.add_argument("--data", help="directory of samples and/or traces")
    t.add_argument("--traces", help="trace directory for context resampling (default: --data)")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("eval", help="decoding loss and calibration of a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--json")
    v.set_defaults(fn=cmd_eval)

    r = sub.add_parser("predict", help="occupancy grid CSV and SVG slice plot for one sample")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--sample", required=True)
    r.add_argument("--grid", default="200x60", help="NSxNT points along s and t")
    r.add_argument("--model", default="ours", choices=("ours", "naive"))
    r.add_argument("--out", required=True)
    r.add_argument("--svg")
    r.set_defaults(fn=cmd_predict)

    o = sub.add_parser("rollout", help="replay an episode under a fixed policy")
    o.add_argument("--ckpt", required=True)
    o.add_argument("--trace", required=True)
    o.add_argument("--policy", default="idle", help="idle | constant:A | script:FILE")
    o.add_argument("--ego", type=int)
    o.add_argument("--frame", type=int, default=0)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--config", help="flat key = value environment config")
    o.add_argument("--set", action="append", metavar="KEY=VALUE")
    o.add_argument("--json")
    o.set_defaults(fn=cmd_rollout)

    c = sub.add_parser("gradcheck", help="run the gradient and oracle suite")
    c.add_argument("--only", nargs="*")
    c.add_argument("--json")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.time()
    try:
        info = args.fn(args)
    except UsageError as exc:
        print(f"occrep: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"occrep: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, StopIteration) as exc:
        print(f"occrep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    target = info.get("manifest") if info else None
    if target is not None:
        manifest = RunManifest(args.command, info["config"], info["seeds"], info["inputs"], info["outputs"],
                               wall_clock=round(time.time() - start, 3))
        manifest.write(_manifest_path(Path(target)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
