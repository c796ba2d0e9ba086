"""Confidence intervals, paired t-test and Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

from .errors import InvalidArgumentError

# above this many non-zero differences the Wilcoxon null is approximated
WILCOXON_EXACT_MAX_N = 15
ALTERNATIVES = ("two-sided", "greater", "less")


def _vector(values, name):
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.isfinite(v).all():
        raise InvalidArgumentError(f"{name} contains NaN or Inf")
    return v


def _pair(a, b):
    a, b = _vector(a, "a"), _vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"paired samples differ in length: {a.size} vs {b.size}")
    return a, b


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    variance: float
    ci_low: float
    ci_high: float
    level: float

    def to_dict(self):
        return {"n": self.n, "mean": self.mean, "variance": self.variance,
                "ci_low": self.ci_low, "ci_high": self.ci_high, "level": self.level}


def mean_ci(values, level=0.95):
    """``(mean, lo, hi)`` with half-width ``t_{(1+level)/2, n-1} * s / sqrt(n)``."""
    v = _vector(values, "values")
    if v.size < 2:
        raise InvalidArgumentError(f"need at least 2 values for a confidence interval, got {v.size}")
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError(f"level must lie in (0, 1), got {level}")
    mean = float(v.mean())
    s = float(v.std(ddof=1))
    half = float(_st.t.ppf((1.0 + level) / 2.0, v.size - 1)) * s / math.sqrt(v.size)
    return mean, mean - half, mean + half


def summarize(values, level=0.95):
    """Mean, sample variance and t-interval in one record."""
    mean, lo, hi = mean_ci(values, level)
    v = _vector(values, "values")
    return Summary(int(v.size), mean, float(v.var(ddof=1)), lo, hi, level)


def paired_t_test(a, b):
    """Two-sided paired t-test of ``a - b``; returns ``(t, p)``."""
    a, b = _pair(a, b)
    if a.size < 5:
        raise InvalidArgumentError(f"paired t-test needs at least 5 pairs, got {a.size}")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise InvalidArgumentError("paired differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(d.size))
    p = 2.0 * float(_st.t.sf(abs(t), d.size - 1))
    return t, min(1.0, p)


@dataclass(frozen=True)
class WilcoxonResult:
    """``statistic`` is W+ for the exact test and Z for the normal approximation."""

    statistic: float
    pvalue: float
    w_plus: float
    n: int
    exact: bool

    def __iter__(self):
        return iter((self.statistic, self.pvalue))


def signed_ranks(d):
    """Mid-ranks of ``|d|`` over the non-zero differences."""
    d = d[d != 0]
    return d, _st.rankdata(np.abs(d))


def _exact_null(ranks):
    """W+ for every one of the 2^n sign patterns."""
    n = ranks.size
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    return bits @ ranks


def _tail_p(null_or_cdf, w, alternative, exact):
    if exact:
        # tolerance guards the comparison against half-rank float noise
        ge = float(np.mean(null_or_cdf >= w - 1e-9))
        le = float(np.mean(null_or_cdf <= w + 1e-9))
    else:
        ge, le = null_or_cdf
    if alternative == "greater":
        return ge
    if alternative == "less":
        return le
    return min(1.0, 2.0 * min(ge, le))


def wilcoxon_signed_rank(a, b, alternative="two-sided"):
    """Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and ties get mid-ranks. Up to 15 non-zero
    differences the null distribution is enumerated exactly; beyond that a
    normal approximation with tie and continuity corrections is used.
    ``greater`` tests whether ``a`` tends to exceed ``b``.
    """
    if alternative not in ALTERNATIVES:
        raise InvalidArgumentError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    a, b = _pair(a, b)
    d, ranks = signed_ranks(a - b)
    n = d.size
    if n == 0:
        raise InvalidArgumentError("all paired differences are zero")
    if n < 5:
        raise InvalidArgumentError(f"need at least 5 non-zero differences, got {n}")
    w_plus = float(ranks[d > 0].sum())
    if n <= WILCOXON_EXACT_MAX_N:
        p = _tail_p(_exact_null(ranks), w_plus, alternative, exact=True)
        return WilcoxonResult(w_plus, p, w_plus, n, True)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    sd = math.sqrt(var)
    z_hi = (w_plus - mean - 0.5) / sd
    z_lo = (w_plus - mean + 0.5) / sd
    ge, le = float(_st.norm.sf(z_hi)), float(_st.norm.cdf(z_lo))
    p = _tail_p((ge, le), w_plus, alternative, exact=False)
    z = (w_plus - mean) / sd
    return WilcoxonResult(z, p, w_plus, n, False)
