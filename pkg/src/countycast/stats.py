"""Correlation measures between features and outbreak outcomes.

Pearson (with a two-sided t-test p-value), Spearman (Pearson on average
ranks), Kendall tau-a, normalized histogram intersection and a plug-in
mutual information estimate, plus the feature x outcome report built on them.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateInputError

METHODS = ("pearson", "spearman", "kendall", "hist_intersection", "mutual_information")
DEFAULT_MI_BINS = 16
DEFAULT_HIST_BINS = 16


@dataclass(frozen=True)
class CorrelationResult:
    method: str
    statistic: float
    p_value: float | None
    n: int


def _pair(x, y, min_len: int):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise DataError(f"need at least {min_len} paired samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("inputs must be finite")
    return x, y


# ---- Student t tail via the regularized incomplete beta function ----------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


# ---- measures --------------------------------------------------------------


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def pearson(x, y) -> CorrelationResult:
    x, y = _pair(x, y, 3)
    r = _pearson_r(x, y)
    m = x.size
    if abs(r) == 1.0:
        p = 0.0
    else:
        p = t_two_sided_p(r * math.sqrt((m - 2) / (1.0 - r * r)), m - 2)
    return CorrelationResult("pearson", r, p, m)


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> CorrelationResult:
    x, y = _pair(x, y, 3)
    return CorrelationResult("spearman", _pearson_r(average_ranks(x), average_ranks(y)), None, x.size)


def spearman_shortcut(x, y) -> float:
    """1 - 6 sum(d^2) / (m (m^2 - 1)); exact only when neither series has ties."""
    x, y = _pair(x, y, 3)
    d = average_ranks(x) - average_ranks(y)
    m = x.size
    return 1.0 - 6.0 * float(d @ d) / (m * (m * m - 1))


def kendall(x, y) -> CorrelationResult:
    """Kendall tau-a: (concordant - discordant) / C(m, 2); tied pairs count for neither."""
    x, y = _pair(x, y, 2)
    m = x.size
    s = 0.0
    for i in range(m - 1):
        s += float(np.sum(np.sign(x[i + 1:] - x[i]) * np.sign(y[i + 1:] - y[i])))
    return CorrelationResult("kendall", s / (m * (m - 1) / 2), None, m)


def histogram_intersection(x, y, bins: int = DEFAULT_HIST_BINS) -> CorrelationResult:
    """Overlap of the two normalized histograms on shared equal-width bins.

    When every value of both series is identical the histograms coincide and
    the result is 1.0.
    """
    x, y = _pair(x, y, 1)
    if bins < 2:
        raise DataError("bins must be >= 2")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi == lo:
        return CorrelationResult("hist_intersection", 1.0, None, x.size)
    hx, _ = np.histogram(x, bins=bins, range=(lo, hi))
    hy, _ = np.histogram(y, bins=bins, range=(lo, hi))
    stat = float(np.minimum(hx / hx.sum(), hy / hy.sum()).sum())
    return CorrelationResult("hist_intersection", min(stat, 1.0), None, x.size)


def _bin_index(v: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.size, dtype=np.int64)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def mutual_information(x, y, bins: int = DEFAULT_MI_BINS) -> CorrelationResult:
    """Plug-in mutual information (nats) over an equal-width 2-D histogram,
    each axis binned over its own range."""
    x, y = _pair(x, y, 1)
    if bins < 2:
        raise DataError("bins must be >= 2")
    joint = np.bincount(_bin_index(x, bins) * bins + _bin_index(y, bins), minlength=bins * bins)
    pxy = joint.reshape(bins, bins) / x.size
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])))
    return CorrelationResult("mutual_information", max(mi, 0.0), None, x.size)


def correlate(x, y, hist_bins: int = DEFAULT_HIST_BINS, mi_bins: int = DEFAULT_MI_BINS) -> dict[str, CorrelationResult]:
    """All five measures; undefined ones (constant input) come back as NaN."""
    out = {}
    x, y = _pair(x, y, 3)
    for method, fn in (
        ("pearson", pearson),
        ("spearman", spearman),
        ("kendall", kendall),
        ("hist_intersection", lambda a, b: histogram_intersection(a, b, hist_bins)),
        ("mutual_information", lambda a, b: mutual_information(a, b, mi_bins)),
    ):
        try:
            out[method] = fn(x, y)
        except DegenerateInputError:
            out[method] = CorrelationResult(method, math.nan, None, x.size)
    return out


# ---- panel report ----------------------------------------------------------


@dataclass(frozen=True)
class CorrelationRow:
    feature: str
    outcome: str
    results: dict


@dataclass(frozen=True)
class CorrelationReport:
    rows: tuple[CorrelationRow, ...]
    report_date: str = ""

    def get(self, feature: str, outcome: str, method: str = "pearson") -> CorrelationResult:
        for r in self.rows:
            if r.feature == feature and r.outcome == outcome:
                return r.results[method]
        raise KeyError((feature, outcome))

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "outcome", "method", "statistic", "p_value", "n"])
            for row in self.rows:
                for method in METHODS:
                    res = row.results[method]
                    w.writerow([
                        row.feature,
                        row.outcome,
                        method,
                        repr(res.statistic),
                        "" if res.p_value is None else repr(res.p_value),
                        res.n,
                    ])
        return path


def correlate_panel(
    panel,
    outcomes: Sequence[str] = ("cumulative_deaths", "cumulative_cases", "cumulative_recoveries"),
    report_date=None,
    hist_bins: int = DEFAULT_HIST_BINS,
    mi_bins: int = DEFAULT_MI_BINS,
) -> CorrelationReport:
    """Cross-sectional correlation of every static feature with each outcome.

    Each county contributes one pair: its feature value and its outcome value
    on ``report_date`` (default: the last panel day). Rows are sorted by
    (feature, outcome).
    """
    if panel.n_counties < 3:
        raise DataError(f"need at least 3 counties for correlation, panel has {panel.n_counties}")
    t = panel.n_days - 1 if report_date is None else panel.date_index(report_date)
    series = {name: panel.outcome(name)[:, t] for name in outcomes}
    rows = []
    for j, feat in sorted(enumerate(panel.static_names), key=lambda p: p[1]):
        for name in sorted(outcomes):
            rows.append(CorrelationRow(feat, name, correlate(panel.static[:, j], series[name], hist_bins, mi_bins)))
    return CorrelationReport(tuple(rows), str(panel.dates[t]))
