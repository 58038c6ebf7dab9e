"""Monocular depth evaluation metrics.

Over the evaluated pixels (ground truth valid and inside the cap), with
prediction ``a`` clamped to the cap and ground truth ``d``:

    rmse      sqrt(mean((a - d)^2))
    rel       mean(|a - d| / d)
    log10     mean(|log10 a - log10 d|)
    rmse_log  sqrt(mean((ln a - ln d)^2))
    d_n       fraction with max(a/d, d/a) < 1.25**n   (strict)

Metrics pool over pixels, so several images can be accumulated into one report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

THRESHOLD = 1.25
JSON_KEYS = ("rmse", "rel", "log10", "rmse_log", "d1", "d2", "d3", "pixels")


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    rel: float
    log10_err: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def to_json(self) -> dict:
        vals = (self.rmse, self.rel, self.log10_err, self.rmse_log, self.delta1, self.delta2, self.delta3)
        out = {k: float(v) for k, v in zip(JSON_KEYS, vals)}
        out["pixels"] = int(self.pixel_count)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        missing = set(JSON_KEYS) - set(d)
        if missing:
            raise ValidationError(f"metric report missing keys {sorted(missing)}")
        return cls(
            float(d["rmse"]), float(d["rel"]), float(d["log10"]), float(d["rmse_log"]),
            float(d["d1"]), float(d["d2"]), float(d["d3"]), int(d["pixels"]),
        )


class MetricAccumulator:
    """Running pixel-pooled sums; ``report()`` turns them into a MetricReport."""

    def __init__(self):
        self.n = 0
        self.sq = 0.0
        self.rel = 0.0
        self.log10 = 0.0
        self.sq_log = 0.0
        self.hits = np.zeros(3, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        a = np.asarray(pred, dtype=np.float64).ravel()
        d = np.asarray(gt, dtype=np.float64).ravel()
        if np.any(d <= 0) or np.any(a <= 0):
            raise ValidationError("depths entering the metrics must be positive")
        diff = a - d
        ratio = np.maximum(a / d, d / a)
        self.n += a.size
        self.sq += float(np.sum(diff * diff))
        self.rel += float(np.sum(np.abs(diff) / d))
        self.log10 += float(np.sum(np.abs(np.log10(a) - np.log10(d))))
        self.sq_log += float(np.sum((np.log(a) - np.log(d)) ** 2))
        for i in range(3):
            self.hits[i] += int(np.count_nonzero(ratio < THRESHOLD ** (i + 1)))

    def add_maps(self, pred, gt, cap) -> None:
        a, d = masked_pairs(pred, gt, cap)
        self.add(a, d)

    def report(self) -> MetricReport:
        if self.n == 0:
            raise ValidationError("no pixels to evaluate")
        n = self.n
        return MetricReport(
            rmse=float(np.sqrt(self.sq / n)),
            rel=self.rel / n,
            log10_err=self.log10 / n,
            rmse_log=float(np.sqrt(self.sq_log / n)),
            delta1=self.hits[0] / n,
            delta2=self.hits[1] / n,
            delta3=self.hits[2] / n,
            pixel_count=n,
        )


def masked_pairs(pred, gt, cap):
    lo, hi = float(cap[0]), float(cap[1])
    if not (0 < lo < hi):
        raise ValidationError(f"evaluation cap needs 0 < min < max, got {cap}")
    pv = np.asarray(pred.values, dtype=np.float64)
    gv = np.asarray(gt.values, dtype=np.float64)
    if pv.shape != gv.shape:
        raise ValidationError(f"prediction {pv.shape} and ground truth {gv.shape} shapes differ")
    mask = gt.valid_mask & (gv >= lo) & (gv <= hi)
    if not mask.any():
        raise ValidationError("evaluation mask is empty")
    return np.clip(pv[mask], lo, hi), gv[mask]


def compute_metrics(pred, gt, cap) -> MetricReport:
    acc = MetricAccumulator()
    acc.add_maps(pred, gt, cap)
    return acc.report()


# -- report tables -----------------------------------------------------------

TABLE_COLUMNS = {
    "nyu": [("RMSE", "rmse"), ("REL", "rel"), ("log10", "log10_err"),
            ("d1", "delta1"), ("d2", "delta2"), ("d3", "delta3")],
    "kitti": [("RMSE", "rmse"), ("REL", "rel"), ("RMSE_log", "rmse_log"),
              ("d1", "delta1"), ("d2", "delta2"), ("d3", "delta3")],
}


def render_table(rows: dict, layout: str = "nyu") -> str:
    """Aligned plain-text table, one row per named report, three decimals."""
    if layout not in TABLE_COLUMNS:
        raise ValidationError(f"unknown table layout {layout!r}")
    cols = TABLE_COLUMNS[layout]
    header = ["Method"] + [c for c, _ in cols]
    body = [[name] + [f"{getattr(r, attr):.3f}" for _, attr in cols] for name, r in rows.items()]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def fmt(row):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        return " | ".join(cells).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"


def dumps_report(report: MetricReport) -> str:
    return json.dumps(report.to_json(), indent=2)
