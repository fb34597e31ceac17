import math

import numpy as np
import pytest

from levyscale.corrector import (
    averaged_corrector,
    cached_estimate_u,
    estimate_grad_u,
    estimate_u,
    fractional_laplacian_1d,
    horizon_for,
    poisson_residual,
)
from levyscale.errors import (
    ArgumentError,
    ConfigurationError,
    IllConditionedError,
    ModelError,
    PrerequisiteError,
)
from levyscale.model import ModelSpec, make_sine_benchmark

BETA = 2.0  # linear benchmark, kappa = 1


def _variant(base, **kw):
    fields = {k: getattr(base, k) for k in base.__dataclass_fields__}
    fields.update(kw)
    return ModelSpec(**fields)


def _within(est, truth, se, bound):
    return np.all(np.abs(est - truth) <= 3 * se + bound + 1e-12)


def test_linear_u_value(linear):
    est = estimate_u(linear, "H", 0.0, 2.0, 3.0, beta_hat=BETA, reps=400)
    assert est.u_value.shape == (1, 1)
    assert _within(est.u_value, 2.0, est.se, est.trunc_bound)
    assert est.horizon == pytest.approx(math.log(4 / 1e-3))


def test_linear_u_batch_crn(linear):
    ys = np.linspace(-3, 3, 5).reshape(-1, 1)
    est = estimate_u(linear, "H", 0.7, 1.0, ys, beta_hat=BETA, reps=400)
    truth = linear.analytic.u(0.7, 1.0, ys)
    assert _within(est.u_value, truth, est.se, est.trunc_bound)
    assert np.all(np.isfinite(est.se)) and est.horizon > 0


def test_zero_rhs(linear):
    est = estimate_u(linear, 0, 0.0, 1.0, [[0.0], [1.0]], beta_hat=BETA)
    np.testing.assert_array_equal(est.u_value, 0.0)
    g = estimate_grad_u(linear, 0, 0.0, 1.0, 0.0, beta_hat=BETA)
    np.testing.assert_array_equal(g.grad_y_u, 0.0)
    np.testing.assert_array_equal(g.grad_x_u, 0.0)


def test_missing_beta_hat(linear):
    with pytest.raises(PrerequisiteError):
        estimate_u(linear, "H", 0.0, 1.0, 0.0)
    with pytest.raises(PrerequisiteError):
        horizon_for([[1.0]], None)


def test_uncentred_h_rejected(linear, linear_ensemble):
    shifted = _variant(linear, H=lambda t, x, y: linear.H(t, x, y) + 0.5)
    with pytest.raises(ModelError):
        estimate_u(shifted, "H", 0.0, 1.0, 0.0, beta_hat=BETA, ensemble=linear_ensemble)


def test_rhs_b_centred_by_ensemble(linear, linear_ensemble):
    # b - bbar = b1 (y - a x): corrector b1 (y - a x) / kappa
    est = estimate_u(linear, "b", 0.0, 1.0, 2.0, beta_hat=BETA, ensemble=linear_ensemble, reps=400)
    assert abs(est.u_value[0, 0] - 0.4 * 1.5) < 3 * est.se[0, 0] + est.trunc_bound[0, 0] + 2e-3


def test_ensemble_average_of_u_vanishes(linear, linear_ensemble):
    ys = linear_ensemble.subsample(2000)
    est = estimate_u(linear, "H", 0.0, 1.0, ys, beta_hat=BETA, reps=200)
    vals = est.u_value[:, 0]
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean()) < 3 * se + est.trunc_bound.max()


def test_linearity_under_crn(sine):
    extra = lambda t, x, y: np.sin(y - 0.5 * np.tanh(x))
    both = lambda t, x, y: sine.H(t, x, y) + extra(t, x, y)
    kw = dict(beta_hat=BETA, reps=200, rng=5)
    ys = np.array([[-1.0], [0.5], [2.0]])
    u1 = estimate_u(sine, "H", 0.0, 1.0, ys, **kw)
    u2 = estimate_u(sine, extra, 0.0, 1.0, ys, **kw)
    u12 = estimate_u(sine, both, 0.0, 1.0, ys, **kw)
    np.testing.assert_allclose(u12.u_value, u1.u_value + u2.u_value, atol=1e-10)


def test_truncation_monotone(sine):
    ys = np.array([[0.0], [3.0]])
    short = estimate_u(sine, "H", 0.0, 1.0, ys, beta_hat=BETA, reps=400, rng=3, horizon=4.0)
    longer = estimate_u(sine, "H", 0.0, 1.0, ys, beta_hat=BETA, reps=400, rng=3, horizon=12.0)
    assert np.all(np.abs(longer.u_value - short.u_value) <= short.trunc_bound + 3 * short.se)
    assert np.all(longer.trunc_bound < short.trunc_bound)


@pytest.mark.parametrize("mode", ["flow", "fd"])
def test_linear_gradients(linear, mode):
    est = estimate_grad_u(linear, "H", 0.0, 2.0, 3.0, mode=mode, beta_hat=BETA, reps=200)
    assert _within(est.grad_y_u, 1.0, est.grad_y_se, est.grad_y_trunc)
    assert _within(est.grad_x_u, -0.5, est.grad_x_se, est.grad_x_trunc)
    assert est.mode == mode


def test_gradient_bounded_over_probes(linear):
    ys = np.linspace(-5, 5, 11).reshape(-1, 1)
    est = estimate_grad_u(linear, "H", 0.0, 0.0, ys, beta_hat=BETA, reps=200)
    assert np.ptp(est.grad_y_u) < 1e-2 and np.abs(est.grad_y_u).max() < 1.1


def test_flow_vs_fd_sine(sine):
    ys = np.linspace(-2, 2, 5).reshape(-1, 1)
    kw = dict(beta_hat=BETA, reps=1000, fd_step=0.05, check_conditioning=False)
    flow = estimate_grad_u(sine, "H", 0.0, 1.0, ys, mode="flow", rng=1, **kw)
    fd = estimate_grad_u(sine, "H", 0.0, 1.0, ys, mode="fd", rng=2, **kw)
    diff = np.abs(flow.grad_y_u - fd.grad_y_u)
    # central differences carry an O(fd_step^2) bias on top of the noise
    assert np.all(diff <= 3 * np.hypot(flow.grad_y_se, fd.grad_y_se) + 2e-3)


def test_fd_step_too_small(sine):
    with pytest.raises(IllConditionedError):
        estimate_grad_u(sine, "H", 0.0, 1.0, 0.0, mode="fd", fd_step=1e-9, beta_hat=BETA, reps=100)


def test_averaged_corrector_linear(linear, linear_ensemble):
    c = averaged_corrector(linear, "cbar", 0.0, 1.0, linear_ensemble, n_outer=50, reps=50, beta_hat=BETA)
    assert abs(c.value[0] - 0.3) <= 3 * c.se[0] + c.trunc_bound[0] + 1e-3
    ts = np.array([0.0, 1.0])
    c2 = averaged_corrector(linear, "cbar", ts, 1.0, linear_ensemble, n_outer=50, reps=50, beta_hat=BETA)
    np.testing.assert_allclose(c2.value[:, 0], 0.3 * (1 + 0.5 * np.sin(ts)), atol=3e-3)
    H = averaged_corrector(linear, "Hbar", 0.0, 1.0, linear_ensemble, n_outer=200, reps=20, beta_hat=BETA)
    assert abs(H.value[0]) <= 3 * H.se[0] + H.trunc_bound[0]


def test_averaged_corrector_zero_c(linear, linear_ensemble):
    model = _variant(linear, c=lambda x, y: np.zeros_like(y))
    c = averaged_corrector(model, "cbar", 0.0, 1.0, linear_ensemble, beta_hat=BETA)
    assert c.value[0] == 0.0 and c.se[0] == 0.0


def test_averaged_corrector_checks(linear, linear_ensemble):
    with pytest.raises(PrerequisiteError):
        averaged_corrector(linear, "cbar", 0.0, 1.0, linear_ensemble)
    with pytest.raises(ArgumentError):
        averaged_corrector(linear, "cbar", 0.0, 2.0, linear_ensemble, beta_hat=BETA)
    with pytest.raises(ArgumentError):
        averaged_corrector(linear, "bbar", 0.0, 1.0, linear_ensemble, beta_hat=BETA)


# ---------------------------------------------------------------------------
# Fractional Laplacian and Poisson residual


@pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
@pytest.mark.parametrize("k", [1, 2])
def test_symbol_check(alpha, k):
    for y in (0.0, 0.7):
        val = fractional_laplacian_1d(lambda z: np.cos(k * z), y, alpha, bound=1.0)
        assert val == pytest.approx(-(k**alpha) * math.cos(k * y), abs=1e-3)


def test_affine_annihilated():
    res = fractional_laplacian_1d(lambda z: 3 * z - 1, 0.4, 1.5, tail="flat", full_output=True)
    assert abs(res.value) < 1e-10


def test_cos_alpha_12():
    val = fractional_laplacian_1d(np.cos, math.pi / 3, 1.2, bound=1.0)
    assert val == pytest.approx(-0.5, abs=1e-3)


def test_quadrature_error_bound_reported():
    res = fractional_laplacian_1d(np.cos, 0.0, 1.5, bound=1.0, full_output=True)
    assert 0 < res.error_bound < 5e-3
    assert abs(res.value + 1.0) <= res.error_bound + 1e-6


def test_residual_linear_analytic(linear):
    u = lambda z: np.asarray(linear.analytic.u(0.0, 0.5, np.reshape(z, (-1, 1))))[:, 0].reshape(np.shape(z))
    rep = poisson_residual(linear, 0.0, 0.5, u_fn=u, y_probe=np.linspace(-4, 4, 9), beta_hat=BETA)
    assert rep.max < 1e-6


def test_residual_zero_problem(linear):
    zero = _variant(linear, H=lambda t, x, y: np.zeros_like(y))
    rep = poisson_residual(zero, 0.0, 0.5, u_fn=lambda z: np.zeros_like(z), y_probe=np.linspace(-4, 4, 5))
    assert rep.max == 0.0


def test_residual_grid_too_narrow(linear):
    with pytest.raises(ConfigurationError) as info:
        poisson_residual(linear, 0.0, 0.5, grid=np.linspace(-10, 10, 41), beta_hat=BETA)
    assert info.value.key == "grid"


def test_cache_roundtrip(tmp_path, linear):
    ys = np.array([[0.0], [1.0]])
    a = cached_estimate_u(tmp_path, linear, "H", 0.0, 1.0, ys, beta_hat=BETA, reps=100)
    b = cached_estimate_u(tmp_path, linear, "H", 0.0, 1.0, ys, beta_hat=BETA, reps=100)
    np.testing.assert_allclose(a.u_value, b.u_value)
    assert len(list(tmp_path.iterdir())) == 1
