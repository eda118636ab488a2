"""Rank tests, FDR adjustment, 2x2 chi-square and permutation chance levels.

Exact null distributions are built by dynamic programming over doubled
midranks, so ties are handled exactly and the result matches a brute-force
enumeration of sign patterns (Wilcoxon) or group assignments (Mann-Whitney).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import chi2, norm, rankdata

ALTERNATIVES = ("two-sided", "greater", "less")
WILCOXON_EXACT_MAX = 25
MANN_WHITNEY_EXACT_MAX = 20


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    method: str  # "exact" or "approx"


def _check_alternative(alternative: str) -> None:
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")


def _tails(dist: np.ndarray, observed: int) -> tuple[float, float]:
    """P(S >= observed) and P(S <= observed) for counts indexed by S."""
    total = dist.sum()
    upper = dist[observed:].sum() / total
    lower = dist[: observed + 1].sum() / total
    return float(upper), float(lower)


def _combine(upper: float, lower: float, alternative: str) -> float:
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2.0 * min(upper, lower))


def _doubled_ranks(values: np.ndarray) -> np.ndarray:
    # midranks are multiples of 1/2, so doubling gives exact integers
    return np.rint(2.0 * rankdata(values)).astype(int)


# -- Wilcoxon signed rank -------------------------------------------------------

def signed_rank_distribution(doubled: np.ndarray) -> np.ndarray:
    """Counts of the doubled positive-rank sum over all 2^n sign patterns."""
    doubled = np.asarray(doubled, dtype=int)
    dist = np.zeros(int(doubled.sum()) + 1, dtype=float)
    dist[0] = 1.0
    reach = 0
    for r in doubled:
        reach += r
        dist[r:reach + 1] = dist[r:reach + 1] + dist[: reach + 1 - r].copy()
    return dist


def wilcoxon_signed_rank(x, y=None, alternative: str = "two-sided", method: str = "auto") -> TestResult:
    """Paired Wilcoxon signed-rank test on ``x - y``.

    Zero differences are dropped. ``alternative="greater"`` tests whether
    ``x`` tends to exceed ``y``. The statistic is the sum of ranks of positive
    differences. Exact for up to 25 nonzero differences unless ``method``
    says otherwise; the normal approximation uses tie and continuity
    corrections.
    """
    _check_alternative(alternative)
    x = np.asarray(x, dtype=float)
    d = x if y is None else x - np.asarray(y, dtype=float)
    if d.ndim != 1 or d.size < 3:
        raise ValueError("need at least 3 paired observations")
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("all paired differences are zero")
    doubled = _doubled_ranks(np.abs(d))
    w2 = int(doubled[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= WILCOXON_EXACT_MAX else "approx"
    if method == "exact":
        upper, lower = _tails(signed_rank_distribution(doubled), w2)
        return TestResult(w2 / 2.0, _combine(upper, lower, alternative), "exact")
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")
    ranks = doubled / 2.0
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    return TestResult(w2 / 2.0, _normal_p(w2 / 2.0, mean, var, alternative), "approx")


def _normal_p(stat: float, mean: float, var: float, alternative: str) -> float:
    if var <= 0:
        return 1.0
    sd = np.sqrt(var)
    upper = float(norm.sf((stat - mean - 0.5) / sd))
    lower = float(norm.cdf((stat - mean + 0.5) / sd))
    return _combine(min(upper, 1.0), min(lower, 1.0), alternative)


# -- Mann-Whitney U ---------------------------------------------------------------

def rank_sum_distribution(doubled: np.ndarray, m: int) -> np.ndarray:
    """Counts of the doubled rank sum of ``m`` items drawn from ``doubled``."""
    doubled = np.asarray(doubled, dtype=int)
    top = int(np.sort(doubled)[::-1][:m].sum())
    dp = np.zeros((m + 1, top + 1), dtype=float)
    dp[0, 0] = 1.0
    for r in doubled:
        for j in range(m, 0, -1):
            dp[j, r:] += dp[j - 1, : top + 1 - r]
    return dp[m]


def mann_whitney_u(a, b, alternative: str = "two-sided", method: str = "auto") -> TestResult:
    """Two-sample rank-sum test; the statistic is ``U_a``.

    ``alternative="greater"`` tests whether ``a`` tends to exceed ``b``.
    Exact when ``len(a) + len(b) <= 20`` (ties handled exactly), otherwise
    normal approximation with tie and continuity corrections.
    """
    _check_alternative(alternative)
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    m, n = a.size, b.size
    pooled = np.concatenate([a, b])
    if not np.all(np.isfinite(pooled)):
        raise ValueError("samples must be finite")
    doubled = _doubled_ranks(pooled)
    r2 = int(doubled[:m].sum())
    offset2 = m * (m + 1)  # doubled minimum rank sum
    u = (r2 - offset2) / 2.0
    if method == "auto":
        method = "exact" if m + n <= MANN_WHITNEY_EXACT_MAX else "approx"
    if method == "exact":
        upper, lower = _tails(rank_sum_distribution(doubled, m), r2)
        return TestResult(u, _combine(upper, lower, alternative), "exact")
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")
    total = m + n
    _, counts = np.unique(pooled, return_counts=True)
    tie = np.sum(counts ** 3 - counts) / (total * (total - 1)) if total > 1 else 0.0
    var = m * n / 12.0 * ((total + 1) - tie)
    return TestResult(u, _normal_p(u, m * n / 2.0, var, alternative), "approx")


# -- corrections and contingency tables ---------------------------------------

def fdr_correct(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=float)
    shape = p.shape
    p = p.ravel()
    if p.size == 0:
        return p.reshape(shape)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out.reshape(shape)


def chi_square_2x2(table) -> tuple[float, float]:
    """Pearson chi-square for a 2x2 table, no continuity correction, df = 1."""
    t = np.asarray(table, dtype=float)
    if t.shape != (2, 2):
        raise ValueError(f"expected a 2x2 table, got shape {t.shape}")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("counts must be finite and nonnegative")
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise ValueError("table has a zero marginal")
    expected = np.outer(rows, cols) / t.sum()
    stat = float(np.sum((t - expected) ** 2 / expected))
    return stat, float(chi2.sf(stat, df=1))


# -- permutation chance level ---------------------------------------------------

@dataclass
class ChanceResult:
    observed: dict[str, np.ndarray]  # per-fold metric values
    chance: dict[str, np.ndarray]  # pooled permutation records
    pvalues: dict[str, float]


def permutation_chance(fold_predictions: Sequence, labels: Sequence, n_perm_per_fold: int = 100,
                       seed: int = 0, threshold: float = 0.5) -> ChanceResult:
    """Chance distribution of ACC/SEN/SPE/AUC under label permutation.

    Labels are shuffled within each fold (so class counts are kept), the
    fold metrics are recomputed ``n_perm_per_fold`` times, and all records
    are pooled. Each metric's observed per-fold values are compared with
    the pooled chance values by a one-sided Mann-Whitney U test.
    """
    from .train import METRICS, compute_metrics

    if len(fold_predictions) != len(labels) or not len(labels):
        raise ValueError("need one label array per fold of predictions")
    rng = np.random.default_rng(seed)
    observed = {k: [] for k in METRICS}
    chance = {k: [] for k in METRICS}
    for f, (scores, y) in enumerate(zip(fold_predictions, labels)):
        scores = np.asarray(scores, dtype=float)
        y = np.asarray(y, dtype=int)
        if y.min() == y.max():
            raise ValueError(f"fold {f} contains a single class")
        rec = compute_metrics(scores, y, threshold).as_dict()
        for k in METRICS:
            observed[k].append(rec[k])
        for _ in range(n_perm_per_fold):
            rec = compute_metrics(scores, rng.permutation(y), threshold).as_dict()
            for k in METRICS:
                chance[k].append(rec[k])
    obs = {k: np.array(v) for k, v in observed.items()}
    pool = {k: np.array(v) for k, v in chance.items()}
    pvalues = {k: mann_whitney_u(obs[k], pool[k], alternative="greater").pvalue for k in METRICS}
    return ChanceResult(obs, pool, pvalues)
