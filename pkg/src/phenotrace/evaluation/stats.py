"""Significance tests: exact Wilcoxon signed-rank, paired and Welch t-tests."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata
from scipy.stats import t as student_t


class TestResult(NamedTuple):
    statistic: float
    pvalue: float
    df: float


TestResult.__test__ = False  # keep pytest from collecting it


# --------------------------------------------------------------------------
# Wilcoxon


def signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of 2*W+.

    Ranks are doubled so midranks stay integral.
    """
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(xs, ys, exact_max_n: int = 20) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes get midranks. For
    ``n <= exact_max_n`` the p-value comes from the exact null distribution;
    above that, a normal approximation with tie and continuity corrections.
    ``statistic`` is W+ and ``df`` carries n.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise ValueError("samples must have equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("no nonzero differences")
    if n < 5:
        raise ValueError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        counts = signed_rank_null_counts(np.rint(2 * ranks))
        total = float(counts.sum())
        k = int(round(2 * w_plus))
        lower = counts[: k + 1].sum() / total
        upper = counts[k:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return TestResult(w_plus, float(p), float(n))


# --------------------------------------------------------------------------
# t distribution


def t_two_sided_p(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    return float(2.0 * student_t.sf(abs(t), df))


def paired_t_test(xs, ys) -> TestResult:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise ValueError("samples must have equal length")
    d = x - y
    n = len(d)
    if n < 2:
        raise ValueError("need at least two pairs")
    sd = float(d.std(ddof=1))
    if sd == 0:
        raise ValueError("zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TestResult(t, t_two_sided_p(t, n - 1), float(n - 1))


def welch_t_test(group_a, group_b) -> TestResult:
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("group too small")
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    if va == 0 and vb == 0:
        raise ValueError("zero variance")
    sa, sb = va / len(a), vb / len(b)
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (len(a) - 1) + sb**2 / (len(b) - 1))
    return TestResult(t, t_two_sided_p(t, df), df)


def significance_stars(p: float) -> str:
    if p is None or not math.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
