"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from .config import load_config
from .errors import ValidationError
from .metrics import MetricReport, render_table

log = logging.getLogger("semdepth")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_train(args) -> None:
    from .pipeline import train

    cfg = load_config(args.config)

    def progress(step, rec):
        log.info("step %d loss %.5f", step, rec["loss"])

    train(cfg, args.out, progress=progress)
    print(Path(args.out) / "model.ckpt")


def _stored_rows(path) -> tuple:
    """A stored report is either one MetricReport JSON or
    {"layout": ..., "rows": {name: MetricReport JSON}}."""
    raw = json.loads(Path(path).read_text())
    if "rows" in raw:
        rows = {name: MetricReport.from_json(r) for name, r in raw["rows"].items()}
        return rows, raw.get("layout")
    return {"model": MetricReport.from_json(raw)}, None


def cmd_evaluate(args) -> None:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.from_report:
        rows, layout = _stored_rows(args.from_report)
        table = render_table(rows, args.table or layout or "nyu")
    else:
        from .pipeline import Pipeline, evaluate

        if not args.data:
            raise ValidationError("evaluate needs --data (or --from-report)")
        pipe = None if args.oracle and not args.checkpoint else Pipeline.load(args.checkpoint) if args.checkpoint else None
        if pipe is None and not args.oracle:
            raise ValidationError("evaluate needs --checkpoint unless --oracle is given")
        profile = ds.get_profile(args.profile) if args.profile else None
        samples = ds.load_dataset_dir(args.data, profile)
        if args.split != "all":
            seed = pipe.config.seed if pipe is not None else args.seed
            samples = ds.split_samples(samples, seed)[args.split]
        if profile is None:
            pj = Path(args.data) / "profile.json"
            profile = ds.DatasetProfile.from_dict(json.loads(pj.read_text())) if pj.exists() else pipe.profile
        report, per_sample = evaluate(pipe, samples, profile, oracle=args.oracle, seed=args.seed)
        layout = args.table or ("kitti" if profile.name == "kitti" else "nyu")
        table = render_table({args.name: report}, layout)
        if out:
            _write_json(out / "report.json", report.to_json())
            _write_json(out / "per_sample.json", per_sample)
        print(json.dumps(report.to_json()))
    if out:
        (out / "table.txt").write_text(table)
    sys.stdout.write(table)


def cmd_infer(args) -> None:
    from .pipeline import Pipeline, infer

    pipe = Pipeline.load(args.checkpoint)
    trace = [] if args.trace else None
    paths = infer(pipe, args.image, args.out, ply=args.ply, use_enhancement=not args.no_enhance,
                  seed=args.seed, trace=trace)
    result = {"outputs": paths}
    if trace is not None:
        result["trace"] = trace
    print(json.dumps(result, indent=2))


def cmd_compare(args) -> None:
    from .pipeline import Pipeline, backends_from_config, compare_enhancement

    if not args.config and not args.checkpoint:
        raise ValidationError("compare-enhancement needs --config, --checkpoint or both")
    cfg = load_config(args.config) if args.config else None
    pipe = Pipeline.load(args.checkpoint) if args.checkpoint else backends_from_config(cfg)
    if args.checkpoint and cfg is not None:
        # backend choice comes from the config, weights from the checkpoint
        pipe.config.backends = cfg.backends
    reports, summary = compare_enhancement(args.data, pipe)
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    for sid, rep in reports.items():
        _write_json(out / "reports" / f"{sid}.json", rep.to_json())
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary["dominant_class"]))


def cmd_make_synthetic(args) -> None:
    profile = ds.get_profile("synthetic")
    splits = ds.corpus(profile, args.count, args.seed, args.width, args.height)
    samples = splits.all if args.split == "all" else splits[args.split]
    if args.downscale:
        samples = [ds.downscale_sample(s) for s in samples]
    ds.write_dataset_dir(args.out, samples, profile)
    print(f"wrote {len(samples)} samples to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semdepth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train all stages from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--profile", choices=sorted(ds.PROFILES))
    e.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.add_argument("--from-report", help="render the table from a stored report JSON instead")
    e.add_argument("--table", choices=["nyu", "kitti"])
    e.add_argument("--name", default="model", help="row label in the rendered table")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", help="predict depth for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--ply", action="store_true")
    i.add_argument("--no-enhance", action="store_true")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--trace", action="store_true", help="report the stage boundaries and tensor shapes")
    i.add_argument("--out", default="infer_out")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("compare-enhancement", help="class-probability comparison over a directory")
    c.add_argument("--data", required=True)
    c.add_argument("--config", help="backend choice; required unless --checkpoint is given")
    c.add_argument("--checkpoint")
    c.add_argument("--out", default="compare_out")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("make-synthetic", help="write a synthetic corpus in the dataset layout")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, default=200)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--width", type=int, default=64)
    m.add_argument("--height", type=int, default=64)
    m.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    m.add_argument("--downscale", action="store_true", help="store images at half resolution")
    m.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are validation errors here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
