import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from levyscale.errors import CapacityError, ParameterError
from levyscale.noise import (
    MAX_SAMPLES,
    RngStream,
    StableNoiseSpec,
    empirical_cf_check,
    increment_sequence,
    isotropic_stable_increment,
    levy_measure_constant,
    stable_increment_1d,
)

U = [0.25, 0.5, 1.0, 2.0]


@pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
def test_cf_matches_symbol(alpha):
    n = 200_000
    s = stable_increment_1d(alpha, 1.0, 1.0, RngStream(3), size=n)
    assert empirical_cf_check(s, U, alpha, 1.0) < 5 / math.sqrt(n)


def test_gaussian_limit_variance():
    s = stable_increment_1d(2.0, 1.0, 1.0, RngStream(1), size=400_000)
    assert s.var() == pytest.approx(2.0, rel=0.01)


def test_gaussian_vs_stable_cf_distinguishable():
    s = stable_increment_1d(2.0, 1.0, 1.0, RngStream(2), size=100_000)
    assert empirical_cf_check(s, U, 1.5, 1.0) > 0.05


def test_scipy_levy_stable_agrees():
    # scipy's S1 parameterisation with scale 1 has cf exp(-|u|^alpha)
    s = stable_increment_1d(1.5, 1.0, 1.0, RngStream(4), size=20_000)
    res = stats.kstest(s, stats.levy_stable(1.5, 0.0).cdf)
    assert res.pvalue > 1e-3


def test_isotropic_d1_matches_1d():
    a = isotropic_stable_increment(1.5, 1, 1.0, RngStream(5), size=20_000)[:, 0]
    b = stable_increment_1d(1.5, 1.0, 1.0, RngStream(6), size=20_000)
    assert stats.ks_2samp(a, b).pvalue > 1e-3


@pytest.mark.parametrize("alpha", [1.3, 1.7])
def test_isotropic_projection_cf(alpha):
    n = 200_000
    z = isotropic_stable_increment(alpha, 3, 0.5, RngStream(7), size=n)
    direction = np.array([1.0, 2.0, -2.0]) / 3.0
    assert empirical_cf_check(z @ direction, U, alpha, 0.5) < 5 / math.sqrt(n)


def test_self_similarity():
    a = stable_increment_1d(1.5, 1.0, 0.25, RngStream(8), size=50_000)
    b = 0.25 ** (1 / 1.5) * stable_increment_1d(1.5, 1.0, 1.0, RngStream(9), size=50_000)
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_replayable_streams():
    spec = StableNoiseSpec(1.5, 2)
    a = increment_sequence(spec, 100, 0.01, RngStream(10, 3))
    b = increment_sequence(spec, 100, 0.01, RngStream(10, 3))
    c = increment_sequence(spec, 100, 0.01, RngStream(10, 4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (100, 2)


def test_children_are_distinct():
    s = RngStream(0)
    draws = [s.child(i).generator().random() for i in range(5)]
    assert len(set(draws)) == 5


def test_scalar_return():
    assert isinstance(stable_increment_1d(1.5, 1.0, 0.1, RngStream(0)), float)


@pytest.mark.parametrize("bad", [1.0, 0.5, 2.1, float("nan")])
def test_rejects_bad_alpha(bad):
    with pytest.raises(ParameterError):
        stable_increment_1d(bad, 1.0, 1.0, RngStream(0))


def test_rejects_bad_arguments():
    with pytest.raises(ParameterError):
        increment_sequence(StableNoiseSpec(1.5), 0, 0.1, RngStream(0))
    with pytest.raises(ParameterError):
        stable_increment_1d(1.5, 1.0, 0.0, RngStream(0))
    with pytest.raises(ParameterError):
        StableNoiseSpec(1.5, dim=0)


def test_capacity_limit():
    with pytest.raises(CapacityError):
        increment_sequence(StableNoiseSpec(1.5, 4), MAX_SAMPLES, 0.1, RngStream(0))


def test_levy_constant_gaussian_limit_and_d1():
    # alpha -> 2 the constant vanishes; d=1, alpha=1.5 closed form
    assert levy_measure_constant(1.999999) < 1e-5
    c = levy_measure_constant(1.5)
    expected = 1.5 * 2**0.5 * math.gamma(1.25) / (math.sqrt(math.pi) * math.gamma(0.25))
    assert c == pytest.approx(expected)


@settings(max_examples=25, deadline=None)
@given(
    alpha=st.floats(1.05, 2.0),
    dt=st.floats(1e-3, 10.0),
    scale=st.floats(0.1, 5.0),
    seed=st.integers(0, 2**32),
)
def test_scaling_identity(alpha, dt, scale, seed):
    # draws at (dt, scale) are exactly (dt*scale)^{1/alpha} times the unit draws
    a = stable_increment_1d(alpha, scale, dt, RngStream(seed), size=16)
    b = stable_increment_1d(alpha, 1.0, 1.0, RngStream(seed), size=16)
    np.testing.assert_allclose(a, (dt * scale) ** (1 / alpha) * b, rtol=1e-10)
    assert np.all(np.isfinite(a))
