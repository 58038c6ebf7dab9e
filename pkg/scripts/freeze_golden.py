"""Regenerate the committed fixtures under tests/golden.

    python3 scripts/freeze_golden.py [--train-log RUN_DIR/train_log.json]

The reference report holds published NYU-style numbers and only exercises the
table renderer. The training log is copied from a default desk run together
with the torch version it was produced with, so the acceptance suite can
compare losses exactly on a matching install.
"""

import argparse
import json
import platform
import shutil
from pathlib import Path

import torch

from semdepth.metrics import MetricReport, render_table

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"

REFERENCE_ROW = MetricReport(rmse=0.223, rel=0.061, log10_err=0.026, rmse_log=0.0,
                             delta1=0.977, delta2=0.998, delta3=1.000, pixel_count=0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-log", help="train_log.json from a default-config run")
    args = ap.parse_args()
    GOLDEN.mkdir(parents=True, exist_ok=True)
    stored = {"layout": "nyu", "rows": {"reference": REFERENCE_ROW.to_json()}}
    (GOLDEN / "reference_report.json").write_text(json.dumps(stored, indent=2) + "\n")
    (GOLDEN / "table_nyu.txt").write_text(render_table({"reference": REFERENCE_ROW}, "nyu"))
    if args.train_log:
        shutil.copyfile(args.train_log, GOLDEN / "train_log_default.json")
        meta = {"torch": torch.__version__, "machine": platform.machine()}
        (GOLDEN / "train_log_default.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print("wrote", *sorted(p.name for p in GOLDEN.iterdir()))


if __name__ == "__main__":
    main()
