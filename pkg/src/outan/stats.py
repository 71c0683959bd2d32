"""Rank statistics used to score sequence induction."""
import math
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .exceptions import DegenerateSampleError, UndefinedCorrelationError

EXACT_MAX_N = 25


def spearman(x, y):
    """Spearman's rho: Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 paired samples")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    sx = math.sqrt(float(rx @ rx))
    sy = math.sqrt(float(ry @ ry))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")
    return float(np.clip(rx @ ry / (sx * sy), -1.0, 1.0))


class SignedRankResult(NamedTuple):
    statistic: float  # sum of ranks of positive differences
    pvalue: float
    n: int
    method: str


def _exact_null(doubled_ranks):
    """Probability mass of the doubled positive-rank sum under random signs."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        nxt = 0.5 * dist[: reach + r + 1]
        nxt[r:] += 0.5 * dist[: reach + 1]
        reach += r
        dist[: reach + 1] = nxt
    return dist


def wilcoxon_signed_rank(samples, mu0=0.0, method="auto"):
    """Two-sided Wilcoxon signed-rank test of zero median shift.

    Zero differences are dropped and ties get mid-ranks. ``method="auto"``
    uses the exact null distribution up to 25 nonzero differences and the
    normal approximation with continuity and tie corrections above that.
    """
    d = np.asarray(samples, dtype=float) - mu0
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateSampleError("all differences are zero")
    if d.size < 5:
        raise ValueError(f"need at least 5 nonzero differences, got {d.size}")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    n = d.size
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = _exact_null(doubled)
        k = int(round(2 * w))
        p = 2 * min(dist[: k + 1].sum(), dist[k:].sum())
    elif method == "approx":
        mean = n * (n + 1) / 4
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(counts**3 - counts)) / 48
        dev = max(abs(w - mean) - 0.5, 0.0)
        p = 2 * ndtr(-dev / math.sqrt(var))
    else:
        raise ValueError(f"unknown method {method!r}")
    return SignedRankResult(w, float(min(1.0, p)), n, method)
