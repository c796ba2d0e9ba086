import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iac_forge.errors import InvalidArgumentError
from iac_forge.stats import mean_ci, paired_t_test, summarize, wilcoxon_signed_rank


def midranks(x):
    """Plain mid-rank oracle: average of the 1-based positions of tied values."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def brute_force_wilcoxon(a, b, alternative):
    d = [u - v for u, v in zip(a, b) if u != v]
    r = midranks([abs(v) for v in d])
    w = sum(rk for rk, v in zip(r, d) if v > 0)
    null = [sum(rk for rk, s in zip(r, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    ge = sum(1 for v in null if v >= w - 1e-9) / len(null)
    le = sum(1 for v in null if v <= w + 1e-9) / len(null)
    if alternative == "greater":
        return w, ge
    if alternative == "less":
        return w, le
    return w, min(1.0, 2 * min(ge, le))


def t4_cdf(t):
    """Closed-form Student t CDF with 4 degrees of freedom."""
    return 0.5 + 3 / 8 * (t / math.sqrt(1 + t * t / 4)) * (1 - t * t / (12 * (1 + t * t / 4)))


def test_mean_ci_two_points():
    mean, lo, hi = mean_ci([0.0, 1.0])
    # one degree of freedom: t quantile is the Cauchy quantile tan(pi * 0.475)
    half = math.tan(math.pi * 0.475) * 0.5
    assert mean == 0.5
    assert abs((hi - lo) / 2 - half) < 1e-9
    assert abs(half - 6.353) < 1e-3


def test_mean_ci_constant():
    assert mean_ci([0.3] * 6) == (pytest.approx(0.3), pytest.approx(0.3), pytest.approx(0.3))
    mean, lo, hi = mean_ci([0.3] * 6)
    assert lo == hi == mean


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=20))
def test_mean_ci_widening(values):
    _, lo95, hi95 = mean_ci(values, 0.95)
    _, lo99, hi99 = mean_ci(values, 0.99)
    assert lo99 <= lo95 + 1e-12 and hi99 >= hi95 - 1e-12


def test_mean_ci_errors():
    with pytest.raises(InvalidArgumentError):
        mean_ci([1.0])
    with pytest.raises(InvalidArgumentError):
        mean_ci([1.0, 2.0], level=1.0)


def test_summary_reports_variance():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s.variance == pytest.approx(5 / 3, abs=1e-15) and s.mean == 2.5


def test_paired_t_hand_fixture():
    a = [2.0, 4.0, 6.0, 8.0, 15.0]
    b = [1.0, 2.0, 3.0, 4.0, 5.0]
    # d = [1, 2, 3, 4, 10]: mean 4, sample variance 12.5
    t_expected = 4 / math.sqrt(12.5 / 5)
    p_expected = 2 * (1 - t4_cdf(t_expected))
    t, p = paired_t_test(a, b)
    assert abs(t - t_expected) < 1e-10
    assert abs(p - p_expected) < 1e-10


def test_paired_t_zero_mean():
    t, p = paired_t_test([1, 2, 3, 4, 5, 6], [2, 1, 4, 3, 6, 5])
    assert t == 0.0 and p == 1.0


@pytest.mark.parametrize("a,b", [([1, 2, 3, 4], [0, 1, 2, 3]), ([1, 2, 3, 4, 5], [0, 1, 2, 3, 4]),
                                 ([1, 2], [1, 2, 3])])
def test_paired_t_degenerate(a, b):
    with pytest.raises(InvalidArgumentError):
        paired_t_test(a, b)


def test_wilcoxon_all_positive_n5():
    w = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0], "greater")
    assert w.pvalue == 0.03125 and w.statistic == 15 and w.exact
    stat, p = w
    assert p == 1 / 2 ** 5


@pytest.mark.parametrize("a,b,why", [
    ([1, 2, 3, 4, 5], [1, 2, 3, 4, 5], "zero"),
    ([1, 2, 3, 4], [0, 0, 0, 0], "at least 5"),
    ([1, 2, 3, 4, 5, 6], [1, 2, 0, 0, 0, 0], "at least 5"),
])
def test_wilcoxon_degenerate(a, b, why):
    with pytest.raises(InvalidArgumentError, match=why):
        wilcoxon_signed_rank(a, b)


def test_wilcoxon_bad_alternative():
    with pytest.raises(InvalidArgumentError):
        wilcoxon_signed_rank([1] * 5, [0] * 5, "bigger")


def test_wilcoxon_matches_brute_force():
    rng = np.random.default_rng(0)
    for case in range(100):
        n = int(rng.integers(5, 11))
        # rounding produces ties and zero differences
        a = np.round(rng.normal(0.2, 1, n), 1).tolist()
        b = np.round(rng.normal(0, 1, n), 1).tolist()
        if sum(u != v for u, v in zip(a, b)) < 5:
            continue
        alt = ("greater", "less", "two-sided")[case % 3]
        w_ref, p_ref = brute_force_wilcoxon(a, b, alt)
        res = wilcoxon_signed_rank(a, b, alt)
        assert res.w_plus == pytest.approx(w_ref, abs=1e-12)
        assert abs(res.pvalue - p_ref) <= 1e-12


def test_wilcoxon_normal_approximation():
    rng = np.random.default_rng(1)
    a = rng.normal(0.3, 1, 40)
    b = rng.normal(0.0, 1, 40)
    res = wilcoxon_signed_rank(a, b, "greater")
    assert not res.exact and res.n == 40
    d = a - b
    r = np.array(midranks(np.abs(d).tolist()))
    w = r[d > 0].sum()
    mu, sd = 40 * 41 / 4, math.sqrt(40 * 41 * 81 / 24)
    z = (w - mu - 0.5) / sd
    p_ref = 0.5 * math.erfc(z / math.sqrt(2))
    assert res.pvalue == pytest.approx(p_ref, abs=1e-12)
    assert res.statistic == pytest.approx((w - mu) / sd)
