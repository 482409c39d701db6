"""Constrained vs naive decoder: test decoding loss on a seeded synthetic corpus.

Trains both decoders (sharing encoder init, batch order and epochs) for each
seed and reports the held-out loss. Usage:

    python3 scripts/table2a.py --scenarios 100 --seeds 0 1 2 --epochs 6
"""

from __future__ import annotations

import argparse
import json
import logging
import time

from occrep.sim import SpawnConfig
from occrep.training import TrainConfig, build_samples, evaluate, generate_traces, split_by_scenario, train


def run(scenarios: int, seeds, epochs: int, anchors: int, duration: float, spawn_rate: float,
        batch_size: int = 8, learning_rate: float = 1e-3, corpus_seed: int = 0):
    traces = generate_traces(scenarios, seed=corpus_seed, duration=duration, spawn=SpawnConfig(rate=spawn_rate))
    by_id = {t.scenario_id: t for t in traces}
    samples = build_samples(traces, anchors, seed=corpus_seed)
    rows = []
    for seed in seeds:
        config = TrainConfig(epochs=epochs, seed=seed, model="both", batch_size=batch_size, learning_rate=learning_rate)
        train_set, test_set = split_by_scenario(samples, config.split, seed)
        start = time.time()
        ckpt = train(train_set, config, by_id, test_set=test_set)
        metrics = evaluate(ckpt, test_set)
        rows.append({
            "seed": seed,
            "ours": metrics["ours"]["mean_loss"],
            "naive": metrics["naive"]["mean_loss"],
            "train_samples": len(train_set),
            "test_samples": len(test_set),
            "seconds": time.time() - start,
            "curves": ckpt.metadata["curves"],
        })
        logging.info("seed %d ours %.4f naive %.4f", seed, rows[-1]["ours"], rows[-1]["naive"])
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--anchors", type=int, default=5)
    ap.add_argument("--duration", type=float, default=16.0)
    ap.add_argument("--spawn-rate", type=float, default=0.3)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = run(args.scenarios, args.seeds, args.epochs, args.anchors, args.duration, args.spawn_rate,
               args.batch_size, args.lr)
    for r in rows:
        verdict = "ours < naive" if r["ours"] < r["naive"] else "ORDER VIOLATED"
        print(f"seed {r['seed']}: ours {r['ours']:.4f}  naive {r['naive']:.4f}  ({verdict}, {r['seconds']:.0f}s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
