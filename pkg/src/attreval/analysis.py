"""Rank correlation, quartile summaries and report files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1


@dataclass(frozen=True)
class ScoreSeries:
    """Scores of one (method, tap, setting), keyed by sample."""

    method: str
    tap: str
    setting: str
    items: tuple  # ((sample_key, score), ...)

    def __post_init__(self):
        keys = [k for k, _ in self.items]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate sample ids in series {self.label}")

    @property
    def label(self):
        return f"{self.method}@{self.tap}/{self.setting}"

    def as_dict(self):
        return dict(self.items)


def series_from_records(records, method, tap, setting):
    items = tuple(((r.sample_id, r.target_cell), r.score) for r in records
                  if r.method == method and r.tap == str(tap) and r.setting == setting)
    return ScoreSeries(method, str(tap), setting, items)


@dataclass(frozen=True)
class Degenerate:
    """Rank correlation is undefined because a series has no rank variance."""

    reason: str

    def __str__(self):
        return "degenerate"


def spearman(a, b):
    """Spearman's rho with average ranks for ties.

    Accepts two ScoreSeries (matched by sample id) or two equal-length
    sequences. Returns a float in ``[-1, 1]`` or :class:`Degenerate`.
    """
    if isinstance(a, ScoreSeries) or isinstance(b, ScoreSeries):
        da, db = a.as_dict(), b.as_dict()
        if set(da) != set(db):
            raise ValueError(f"series {a.label} and {b.label} cover different samples")
        keys = sorted(da)
        xa = np.array([da[k] for k in keys], np.float64)
        xb = np.array([db[k] for k in keys], np.float64)
    else:
        xa, xb = np.asarray(a, np.float64), np.asarray(b, np.float64)
        if xa.shape != xb.shape or xa.ndim != 1:
            raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(xa) < 2:
        return Degenerate("fewer than two samples")
    ra = rankdata(xa, method="average")
    rb = rankdata(xb, method="average")
    ca, cb = ra - ra.mean(), rb - rb.mean()
    va, vb = float(np.dot(ca, ca)), float(np.dot(cb, cb))
    if va == 0 or vb == 0:
        return Degenerate("constant scores")
    rho = float(np.dot(ca, cb)) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, rho))


class Quartiles(NamedTuple):
    min: float
    q1: float
    median: float
    q3: float
    max: float


def quartiles(values):
    """Five-number summary with linear interpolation between order statistics.

    The ``p`` quantile of sorted ``x[0..n-1]`` is read at position
    ``p * (n - 1)`` and linearly interpolated.
    """
    v = np.asarray(list(values), np.float64)
    if v.size == 0:
        raise ValueError("quartiles of an empty series")
    q = np.quantile(v, [0, 0.25, 0.5, 0.75, 1], method="linear")
    return Quartiles(*(float(x) for x in q))


@dataclass
class CorrelationMatrix:
    labels: list
    values: list  # rows of float or Degenerate

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.labels)
            for label, row in zip(self.labels, self.values):
                w.writerow([label] + [str(v) if isinstance(v, Degenerate) else repr(v)
                                      for v in row])

    def array(self):
        """Float matrix with NaN for degenerate entries."""
        return np.array([[math.nan if isinstance(v, Degenerate) else v for v in row]
                         for row in self.values])


def correlation_matrix(series):
    series = list(series)
    n = len(series)
    vals = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            if i == j:
                rho = spearman(series[i], series[i])
                vals[i][i] = 1.0 if not isinstance(rho, Degenerate) else rho
            else:
                rho = spearman(series[i], series[j])
                vals[i][j] = vals[j][i] = rho
    return CorrelationMatrix([s.label for s in series], vals)


# ----------------------------------------------------------------------------

SUMMARY_FIELDS = ("method", "tap", "setting", "count", "mean", "min", "q1", "median", "q3",
                  "max", "frac_one")


def summarize(records):
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.tap, r.setting), []).append(r.score)
    rows = []
    for (method, tap, setting) in sorted(groups):
        s = groups[(method, tap, setting)]
        q = quartiles(s)
        rows.append({"method": method, "tap": tap, "setting": setting, "count": len(s),
                     "mean": math.fsum(s) / len(s), "min": q.min, "q1": q.q1,
                     "median": q.median, "q3": q.q3, "max": q.max,
                     "frac_one": sum(1 for x in s if x == 1.0) / len(s)})
    return rows


def emit_report(records, out_dir):
    """Write ``summary.csv`` and ``summary.json``; returns the summary rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if not records:
        log.warning("no records to summarise; writing empty report")
    rows = summarize(records)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in rows:
            w.writerow([repr(row[f]) if isinstance(row[f], float) else row[f]
                        for f in SUMMARY_FIELDS])
    doc = {"schema_version": REPORT_SCHEMA, "total_records": len(records), "groups": rows}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return rows


def read_summary_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        row = {k: r[k] for k in ("method", "tap", "setting")}
        row["count"] = int(r["count"])
        for k in SUMMARY_FIELDS[4:]:
            row[k] = float(r[k])
        out.append(row)
    return out


__all__ = [
    "ScoreSeries", "series_from_records", "Degenerate", "spearman", "Quartiles", "quartiles",
    "CorrelationMatrix", "correlation_matrix", "summarize", "emit_report", "read_summary_csv",
    "REPORT_SCHEMA",
]
