"""Nonparametric and correlation statistics used throughout the toolkit.

Rank tests carry their own exact null distributions (computed by dynamic
programming over midranks) for small samples and switch to tie-corrected
normal approximations with a 0.5 continuity correction beyond the exact
cutoffs.  Only the normal and Student-t CDFs are delegated to
scipy.special; every test statistic, tie rule and adjustment procedure is
implemented here so their behavior is pinned by this module alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ArgumentError, DegenerateStatisticsError

# Exact-enumeration cutoffs.  Kept small enough that the dynamic programs
# stay cheap inside tight simulation loops.
SIGNED_RANK_EXACT_MAX_N = 25
RANK_SUM_EXACT_MAX_PRODUCT = 100


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: tuple[int, ...]
    method: str

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ArgumentError(f"p-value {self.p_value} outside [0, 1]")


@dataclass(frozen=True)
class FdrResult:
    p_values: np.ndarray
    adjusted: np.ndarray
    rejected: np.ndarray
    q: float


def _midranks(values):
    """Ranks 1..n with ties assigned the mean of their rank range."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _normal_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _signed_rank_tail_counts(doubled_ranks):
    """Distribution of the positive-rank sum over all 2^n sign patterns.

    Ranks are doubled so midranks become integers; returns an array where
    entry s counts sign patterns with doubled positive-rank sum s.  Exact,
    including ties, because the DP runs over the observed midranks.
    """
    total = int(np.sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs, alternative="two-sided"):
    """Wilcoxon signed-rank test of the differences against zero.

    Zero differences are dropped (classic convention).  Exact null
    distribution for n <= 25; otherwise a tie-corrected normal
    approximation with continuity correction.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ArgumentError(f"unknown alternative {alternative!r}")
    diffs = np.asarray(diffs, dtype=float)
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return TestResult(0.0, 1.0, (0,), "degenerate: all differences zero")

    ranks = _midranks(np.abs(diffs))
    w_plus = float(np.sum(ranks[diffs > 0.0]))

    if n <= SIGNED_RANK_EXACT_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(int)
        counts = _signed_rank_tail_counts(doubled)
        total = counts.sum()
        w2 = int(round(2.0 * w_plus))
        cdf = counts[: w2 + 1].sum() / total
        sf = counts[w2:].sum() / total
        if alternative == "greater":
            p = sf
        elif alternative == "less":
            p = cdf
        else:
            p = min(1.0, 2.0 * min(cdf, sf))
        return TestResult(w_plus, float(p), (n,), "exact signed-rank (DP over midranks)")

    mean = float(np.sum(ranks)) / 2.0
    var = float(np.sum(ranks**2)) / 4.0
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (w_plus - mean - 0.5) / sd
        p = _normal_sf(z)
    elif alternative == "less":
        z = (w_plus - mean + 0.5) / sd
        p = 1.0 - _normal_sf(z)
    else:
        z = (abs(w_plus - mean) - 0.5) / sd
        p = min(1.0, 2.0 * _normal_sf(max(z, 0.0)))
    return TestResult(w_plus, float(p), (n,), "normal approximation, tie-corrected, cc=0.5")


def _rank_sum_tail_counts(doubled_ranks, n1):
    """Counts of size-n1 subsets of the ranks by doubled rank sum."""
    total = int(np.sum(doubled_ranks))
    counts = np.zeros((n1 + 1, total + 1), dtype=float)
    counts[0, 0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        for k in range(n1, 0, -1):
            counts[k, r:] += counts[k - 1, : total + 1 - r]
    return counts[n1]


def mann_whitney_u(a, b, alternative="two-sided", paired_presentation=False):
    """Mann-Whitney U (Wilcoxon rank-sum) test of two samples.

    Exact null distribution (DP over midranks of the pooled sample) when
    n*m <= 100, tie-corrected normal approximation with continuity
    correction otherwise.  ``paired_presentation`` documents that the two
    lists arise from matched observations; the statistic is unchanged, but
    equal lengths are enforced and the method note records the reading.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ArgumentError(f"unknown alternative {alternative!r}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ArgumentError("both samples must be non-empty")
    if paired_presentation and a.size != b.size:
        raise ArgumentError("paired presentation requires equal-length lists")

    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r1 = float(np.sum(ranks[:n1]))
    u = r1 - n1 * (n1 + 1) / 2.0

    note = " (paired lists, rank-sum reading)" if paired_presentation else ""
    if n1 * n2 <= RANK_SUM_EXACT_MAX_PRODUCT:
        doubled = np.rint(2.0 * ranks).astype(int)
        counts = _rank_sum_tail_counts(doubled, n1)
        total = counts.sum()
        r2x = int(round(2.0 * r1))
        cdf = counts[: r2x + 1].sum() / total
        sf = counts[r2x:].sum() / total
        if alternative == "greater":
            p = sf
        elif alternative == "less":
            p = cdf
        else:
            p = min(1.0, 2.0 * min(cdf, sf))
        return TestResult(u, float(p), (n1, n2), "exact rank-sum (DP over midranks)" + note)

    mean = n1 * n2 / 2.0
    nn = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (nn * (nn - 1.0))
    var = n1 * n2 / 12.0 * ((nn + 1.0) - tie_term)
    if var <= 0.0:
        return TestResult(u, 1.0, (n1, n2), "degenerate: all pooled values tied" + note)
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (u - mean - 0.5) / sd
        p = _normal_sf(z)
    elif alternative == "less":
        z = (u - mean + 0.5) / sd
        p = 1.0 - _normal_sf(z)
    else:
        z = (abs(u - mean) - 0.5) / sd
        p = min(1.0, 2.0 * _normal_sf(max(z, 0.0)))
    return TestResult(u, float(p), (n1, n2), "normal approximation, tie-corrected, cc=0.5" + note)


def paired_t(a, b, alternative="two-sided"):
    """Paired Student t test on matched samples."""
    if alternative != "two-sided":
        raise ArgumentError("only the two-sided alternative is implemented")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ArgumentError("paired t needs two equal-length samples of size >= 2")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateStatisticsError("differences have zero variance")
    n = d.size
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    df = n - 1
    # two-sided p via the regularized incomplete beta identity
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TestResult(t, min(1.0, p), (n,), f"t distribution, df={df}")


def bh_fdr(p_values, q=0.05):
    """Benjamini-Hochberg step-up adjustment.

    Returns adjusted p-values in the input order plus rejection flags at
    level q.  adjusted_(i) = min_{j>=i} p_(j) * m / j, clipped at 1.
    """
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ArgumentError("p_values must be one-dimensional")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ArgumentError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        empty = np.array([], dtype=float)
        return FdrResult(p.copy(), empty, np.array([], dtype=bool), q)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    adjusted = np.empty(m, dtype=float)
    adjusted[order] = adjusted_sorted
    return FdrResult(p.copy(), adjusted, adjusted <= q, q)


def pearson(x, y):
    """Pearson product-moment correlation with explicit centering."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ArgumentError("pearson needs two equal-length vectors of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateStatisticsError("an argument has zero variance")
    r = float(np.sum(xc * yc)) / (sx * sy)
    return min(1.0, max(-1.0, r))
