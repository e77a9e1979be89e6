"""Evaluation metrics, error distributions and timing/memory measurements."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ConstantVector, EmptyList, ShapeMismatch, ZeroTruthRow


def rel_l2(preds, truths):
    """Mean and per-sample relative L2 error, one sample per row."""
    P = np.atleast_2d(np.asarray(preds, dtype=float))
    T = np.atleast_2d(np.asarray(truths, dtype=float))
    if P.shape != T.shape:
        raise ShapeMismatch(f"prediction shape {P.shape} != truth shape {T.shape}")
    P = P.reshape(P.shape[0], -1)
    T = T.reshape(T.shape[0], -1)
    tn = np.linalg.norm(T, axis=1)
    if np.any(tn == 0):
        raise ZeroTruthRow(f"truth row {int(np.flatnonzero(tn == 0)[0])} is identically zero")
    per = np.linalg.norm(P - T, axis=1) / tn
    return float(per.mean()), per


def pearson_dissimilarity(truths, preds) -> float:
    y = np.asarray(truths, dtype=float).ravel()
    yp = np.asarray(preds, dtype=float).ravel()
    if y.shape != yp.shape:
        raise ShapeMismatch("truth and prediction sizes differ")
    dy = y - y.mean()
    dp = yp - yp.mean()
    sy = np.sqrt(dy @ dy)
    sp = np.sqrt(dp @ dp)
    if sy == 0 or sp == 0:
        raise ConstantVector("Pearson correlation undefined for a constant vector")
    r = (dy @ dp) / (sy * sp)
    return float(1.0 - np.clip(r, -1.0, 1.0))


@dataclass
class ErrorDistribution:
    bin_edges: np.ndarray
    counts: np.ndarray
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    whisker_low: float
    whisker_high: float
    n_box_outliers: int
    threshold: float
    fraction_above: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def error_distribution(errors, bin_count: int = 20, threshold: float = 0.04) -> ErrorDistribution:
    """Histogram over ``[0, max]`` plus a box-plot summary (1.5 IQR whiskers)."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyList("error list is empty")
    top = e.max()
    counts, edges = np.histogram(e, bins=bin_count, range=(0.0, top if top > 0 else 1.0))
    q1, med, q3 = np.percentile(e, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = e[(e >= lo_fence) & (e <= hi_fence)]
    return ErrorDistribution(
        bin_edges=edges, counts=counts, minimum=float(e.min()), q1=float(q1),
        median=float(med), q3=float(q3), maximum=float(top),
        whisker_low=float(inside.min()), whisker_high=float(inside.max()),
        n_box_outliers=int(e.size - inside.size), threshold=threshold,
        fraction_above=float(np.mean(e > threshold)),
    )


def peak_rss_mb() -> float:
    """Peak resident set size of this process in MB (approximate)."""
    try:
        import resource

        kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        return kb / 1024.0
    except ImportError:  # pragma: no cover - non-POSIX
        import psutil

        return psutil.Process().memory_info().rss / 2**20


@dataclass
class BenchResult:
    times: list
    peak_rss_mb: float

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def min(self) -> float:
        return float(np.min(self.times))

    @property
    def max(self) -> float:
        return float(np.max(self.times))


def bench(task, repeats: int = 5) -> BenchResult:
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        task()
        times.append(time.perf_counter() - t0)
    return BenchResult(times, peak_rss_mb())


@dataclass
class MetricReport:
    mean_rel_l2: float
    pearson_dissimilarity: float
    per_sample: np.ndarray
    distribution: ErrorDistribution
    timings: dict = field(default_factory=dict)
    peak_rss_mb: float = 0.0

    @classmethod
    def compute(cls, preds, truths, bin_count=20, threshold=0.04, timings=None):
        mean, per = rel_l2(preds, truths)
        return cls(mean, pearson_dissimilarity(truths, preds), per,
                   error_distribution(per, bin_count, threshold), dict(timings or {}),
                   peak_rss_mb())

    def row(self, **labels) -> dict:
        d = self.distribution
        out = dict(labels)
        out.update(mean_rel_l2=self.mean_rel_l2, pearson_dissimilarity=self.pearson_dissimilarity,
                   median=d.median, q1=d.q1, q3=d.q3, fraction_above=d.fraction_above,
                   threshold=d.threshold, peak_rss_mb=self.peak_rss_mb)
        out.update({f"time_{k}": v for k, v in self.timings.items()})
        return out


def append_csv(path, row: dict) -> None:
    """Append one row, writing the header if the file is new or empty."""
    import os

    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            w.writeheader()
        w.writerow(row)


def write_per_sample(path, per_sample) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "rel_l2"])
        for i, e in enumerate(per_sample):
            w.writerow([i, repr(float(e))])


def write_hist(path, dist: ErrorDistribution) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(dist.bin_edges[:-1], dist.bin_edges[1:], dist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
