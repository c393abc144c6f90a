"""Nonparametric paired and unpaired tests over metric distributions.

Both tests report two-sided p-values with the doubling convention
p = min(1, 2 * min(P(T <= t), P(T >= t))). Small samples use exact null
distributions computed by dynamic programming over doubled midranks, which
stays exact in the presence of ties; larger samples fall back to the normal
approximation with tie correction and a 0.5 continuity correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DegenerateSample, ShapeMismatch

WILCOXON_EXACT_N = 25
MANN_WHITNEY_EXACT_N = 30  # pooled size threshold

TEST_WILCOXON = "wilcoxon_signed_rank"
TEST_MANN_WHITNEY = "mann_whitney_u"


@dataclass(frozen=True)
class StatTestResult:
    test: str
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    method: str
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")


def _two_sided_from_cdf(p_le: float, p_ge: float) -> float:
    return min(1.0, 2.0 * min(p_le, p_ge))


def _signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each doubled rank-sum value over all 2^n sign assignments."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> StatTestResult:
    """Two-sided paired test; zero differences are dropped before ranking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch(f"paired samples must be equal-length 1D, got {a.shape} vs {b.shape}")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    d = a - b
    d = d[d != 0.0]
    if d.size == 0:
        raise DegenerateSample("all paired differences are zero")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    n = int(d.size)
    w_minus = n * (n + 1) / 2.0 - w_plus
    statistic = min(w_plus, w_minus)

    if n <= WILCOXON_EXACT_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = _signed_rank_null_counts(doubled)
        total = counts.sum()
        t = int(round(2.0 * w_plus))
        p_le = counts[: t + 1].sum() / total
        p_ge = counts[t:].sum() / total
        p = _two_sided_from_cdf(p_le, p_ge)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= (tie_counts**3 - tie_counts).sum() / 48.0
        if var <= 0:
            raise DegenerateSample("zero variance in signed-rank null")
        shift = np.sign(w_plus - mean) * 0.5
        z = (w_plus - mean - shift) / np.sqrt(var)
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
        method = "normal_approx"
    return StatTestResult(TEST_WILCOXON, statistic, p, int(a.size), int(b.size), method)


def _rank_sum_null_counts(doubled_ranks: np.ndarray, n_a: int) -> np.ndarray:
    """Counts of doubled rank-sum values over all size-n_a subsets of the pool.

    dp[k, s] = number of k-subsets of the processed prefix with doubled rank
    sum s; exact for tied pools because midranks enter the sum directly.
    """
    total = int(doubled_ranks.sum())
    dp = np.zeros((n_a + 1, total + 1), dtype=np.float64)
    dp[0, 0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        for k in range(n_a, 0, -1):
            dp[k, r:] += dp[k - 1, : total + 1 - r]
    return dp[n_a]


def mann_whitney_u(a, b) -> StatTestResult:
    """Two-sided unpaired rank test on two independent samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeMismatch("samples must be 1D")
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n_a, n_b = int(a.size), int(b.size)
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        raise DegenerateSample("pooled sample is constant")

    ranks = rankdata(pooled)
    r_a = float(ranks[:n_a].sum())
    u_a = r_a - n_a * (n_a + 1) / 2.0
    u_b = n_a * n_b - u_a
    statistic = min(u_a, u_b)

    if n_a + n_b <= MANN_WHITNEY_EXACT_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = _rank_sum_null_counts(doubled, n_a)
        total = counts.sum()
        t = int(round(2.0 * r_a))
        p_le = counts[: t + 1].sum() / total
        p_ge = counts[t:].sum() / total
        p = _two_sided_from_cdf(p_le, p_ge)
        method = "exact"
    else:
        n = n_a + n_b
        mean = n_a * n_b / 2.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = (tie_counts**3 - tie_counts).sum() / (n * (n - 1))
        var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
        if var <= 0:
            raise DegenerateSample("zero variance in rank-sum null")
        shift = np.sign(u_a - mean) * 0.5
        z = (u_a - mean - shift) / np.sqrt(var)
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
        method = "normal_approx"
    return StatTestResult(TEST_MANN_WHITNEY, statistic, p, n_a, n_b, method)


PLANE_AXES = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass(frozen=True)
class PlaneAnalysis:
    plane_mse: dict[str, np.ndarray]
    tests: dict[str, StatTestResult]


def per_plane_error_analysis(pred: np.ndarray, gt: np.ndarray) -> PlaneAnalysis:
    """Per-slice MSE distributions along the three anatomical axes, with
    axial-vs-coronal and axial-vs-sagittal rank tests.

    Degenerate comparisons (e.g. a perfect prediction) are reported with the
    degenerate flag set and p = 1 rather than raised.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ShapeMismatch(
            f"expected matching [D, H, W] volumes, got {pred.shape} vs {gt.shape}"
        )
    sq = (pred - gt) ** 2
    plane_mse = {
        name: np.array([sq.take(i, axis=axis).mean() for i in range(sq.shape[axis])])
        for name, axis in PLANE_AXES.items()
    }
    tests = {}
    for other in ("coronal", "sagittal"):
        key = f"axial_vs_{other}"
        try:
            tests[key] = mann_whitney_u(plane_mse["axial"], plane_mse[other])
        except DegenerateSample:
            tests[key] = StatTestResult(
                TEST_MANN_WHITNEY,
                statistic=0.0,
                p_value=1.0,
                n_a=plane_mse["axial"].size,
                n_b=plane_mse[other].size,
                method="degenerate",
                degenerate=True,
            )
    return PlaneAnalysis(plane_mse=plane_mse, tests=tests)
