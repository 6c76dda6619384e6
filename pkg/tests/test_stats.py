import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from oocmatch.errors import DegenerateTestError
from oocmatch.stats import paired_t_test, regularized_beta, t_cdf


def test_reference_example():
    a, b = [1, 2, 3, 4, 5], [2, 2, 4, 4, 6]
    t, p = paired_t_test(a, b)
    ref = sps.ttest_rel(a, b)
    assert abs(t - ref.statistic) <= 1e-6 and abs(p - ref.pvalue) <= 1e-6


def test_symmetric_differences():
    t, p = paired_t_test([1, 0, 1, 0], [0, 1, 0, 1])
    assert t == 0.0 and p == 1.0


def test_zero_differences_degenerate():
    with pytest.raises(DegenerateTestError):
        paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])


@pytest.mark.parametrize("c", [1e-3, -0.5, 7.0])
def test_constant_shift_is_detected(c, rng):
    a = rng.normal(size=6)
    _, p = paired_t_test(a, a + c)
    assert p < 1e-6


def test_input_validation():
    with pytest.raises(ValueError):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_t_test([1], [2])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_matches_scipy(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=n), rng.normal(size=n) + rng.uniform(-1, 1)
    t, p = paired_t_test(a, b)
    ref = sps.ttest_rel(a, b)
    assert t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-9)
    assert p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.05, 50), st.floats(0.05, 50))
def test_regularized_beta_matches_scipy(x, a, b):
    assert regularized_beta(x, a, b) == pytest.approx(sps.beta.cdf(x, a, b), abs=1e-10)


@pytest.mark.parametrize("t,df", [(-3.0, 2), (0.0, 5), (0.7, 1), (2.5, 30)])
def test_t_cdf_matches_scipy(t, df):
    assert t_cdf(t, df) == pytest.approx(sps.t.cdf(t, df), abs=1e-12)
