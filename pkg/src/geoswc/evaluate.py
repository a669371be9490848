"""Accuracy at great-circle distance ranges and side-by-side run comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from geoswc.geo import GeoPoint, gcd_km_arrays

BASELINE_RANGES = (1.0, 25.0, 200.0, 750.0, 2500.0)
FINE_RANGES = (0.1, 1.0, 5.0, 10.0)
ALL_RANGES = tuple(sorted(set(BASELINE_RANGES) | set(FINE_RANGES)))


class EmptyInput(ValueError):
    pass


class QueryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RangeSet:
    thresholds: tuple[float, ...] = ALL_RANGES

    def __post_init__(self) -> None:
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be positive and strictly increasing: {t}")
        object.__setattr__(self, "thresholds", t)

    def __iter__(self):
        return iter(self.thresholds)

    def __len__(self) -> int:
        return len(self.thresholds)


def range_label(km: float) -> str:
    return f"{km * 1000:g}m" if km < 1 else f"{km:g}km"


def _latlon(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 2).astype(np.float64)
    pts = list(points)
    if pts and isinstance(pts[0], GeoPoint):
        return np.array([[p.lat, p.lon] for p in pts], dtype=np.float64)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def errors_km(estimates, truths) -> np.ndarray:
    est, tru = _latlon(estimates), _latlon(truths)
    if est.shape != tru.shape:
        raise ValueError("estimates and truths differ in length")
    return gcd_km_arrays(est[:, 0], est[:, 1], tru[:, 0], tru[:, 1])


def accuracy_at(estimates, truths, ranges: RangeSet | Sequence[float] = RangeSet()) -> dict[float, float]:
    """Fraction of queries whose error is strictly below each threshold."""
    ranges = ranges if isinstance(ranges, RangeSet) else RangeSet(tuple(ranges))
    err = errors_km(estimates, truths)
    if err.size == 0:
        raise EmptyInput("no predictions to evaluate")
    return {r: float(np.count_nonzero(err < r)) / err.size for r in ranges}


@dataclass(frozen=True)
class Run:
    name: str
    ids: np.ndarray
    estimates: np.ndarray  # (n, 2) lat/lon
    truths: np.ndarray

    def accuracy(self, ranges: RangeSet = RangeSet()) -> dict[float, float]:
        return accuracy_at(self.estimates, self.truths, ranges)


@dataclass(frozen=True)
class Comparison:
    rows: list[dict]

    @property
    def signs(self) -> str:
        return "".join("+" if r["delta"] > 0 else "-" if r["delta"] < 0 else "=" for r in self.rows)


def compare_runs(a: Run, b: Run, ranges: RangeSet = RangeSet()) -> Comparison:
    """Per-range accuracy of ``a`` minus ``b`` on an identical query set."""
    oa, ob = np.argsort(a.ids, kind="stable"), np.argsort(b.ids, kind="stable")
    if not np.array_equal(a.ids[oa], b.ids[ob]) or not np.allclose(a.truths[oa], b.truths[ob], rtol=0, atol=0):
        raise QueryMismatch(f"runs {a.name!r} and {b.name!r} cover different queries")
    ea = errors_km(a.estimates, a.truths)
    eb = errors_km(b.estimates, b.truths)
    n = len(ea)
    rows = []
    for r in ranges:
        ca, cb = int(np.count_nonzero(ea < r)), int(np.count_nonzero(eb < r))
        rows.append({"range_km": r, "acc_a": ca / n, "acc_b": cb / n, "delta": (ca - cb) / n, "count_a": ca,
                     "count_b": cb})
    return Comparison(rows)


def format_table(results: Mapping[str, Mapping[float, float]], ranges: RangeSet = RangeSet(), title: str = "") -> str:
    """Plain-text table: one row per method, accuracy in percent per range."""
    head = ["Method"] + [range_label(r) for r in ranges]
    rows = [[name] + [f"{100 * acc[r]:.1f}" for r in ranges] for name, acc in results.items()]
    widths = [max(len(row[i]) for row in [head] + rows) for i in range(len(head))]
    line = lambda cells: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    out = [title] if title else []
    out += [line(head), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows]
    return "\n".join(out)


def results_json(results: Mapping[str, Mapping[float, float]], **extra) -> dict:
    doc = {"results": {name: {range_label(r): v for r, v in acc.items()} for name, acc in results.items()}}
    doc.update(extra)
    return doc


def write_report(path_txt: str | Path, path_json: str | Path, results, ranges: RangeSet = RangeSet(), **extra):
    Path(path_txt).write_text(format_table(results, ranges) + "\n", encoding="utf-8")
    Path(path_json).write_text(json.dumps(results_json(results, **extra), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
