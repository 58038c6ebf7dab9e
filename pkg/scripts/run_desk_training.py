"""Train the default configuration on the synthetic corpus and score the
held-out split.

    python3 scripts/run_desk_training.py --out runs/desk [--seed 0]
"""

import argparse
import json
import time
from pathlib import Path

import torch

from semdepth.config import RunConfig
from semdepth.metrics import render_table
from semdepth.pipeline import evaluate, load_training_samples, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = RunConfig(seed=args.seed).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())

    t0 = time.perf_counter()
    pipe, log = train(cfg, out, progress=lambda s, r: s % 100 == 0 and print(f"step {s:5d}  silog {r['silog']:.4f}", flush=True))
    elapsed = time.perf_counter() - t0
    splits, profile = load_training_samples(cfg)
    report, _ = evaluate(pipe, splits.test, profile)
    (out / "test_report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    print(render_table({"desk": report}, "nyu"), end="")
    print(f"training wall time {elapsed:.1f} s")


if __name__ == "__main__":
    main()
