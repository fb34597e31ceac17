import math

import numpy as np
import pytest
from scipy import stats

from levyscale.errors import ArgumentError, ConfigurationError
from levyscale.harness import (
    STRONG_IMPOSSIBLE,
    ExperimentConfig,
    predictor_exponent,
    predictor_terms,
    run_strong_experiment,
    run_weak_experiment,
    tabulate_drift,
    theoretical_predictor,
)
from levyscale.model import ModelSpec, make_linear_benchmark, make_schedule
from levyscale.noise import RngStream, stable_increment_1d
from levyscale.stats import fit_rate, median_of_means

R1 = make_schedule("R1", 1.0, 0.125, 0.5)
R2 = make_schedule("R2", 0.625, 0.125, 0.5)
R3 = make_schedule("R3", 1.0, 0.5, 0.25)
R4 = make_schedule("R4", 1.0, 0.5, 0.5)


def _config(regime="R1", schedule=R1, **kw):
    base = dict(
        model="linear",
        regime=regime,
        schedule=schedule,
        eps_grid=(2**-3, 2**-4, 2**-5),
        reps=300,
        mom_groups=10,
        refine=False,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Predictors


def test_r1_strong_predictor_value():
    assert theoretical_predictor("R1", "strong", 1.5, 1.5, 1.5, R1, 2**-6) == pytest.approx(2**-1.25, rel=1e-12)
    exps = sorted(ex for _, ex in predictor_terms("R1", "strong", 1.5, 1.5, 1.5, R1))
    np.testing.assert_allclose(exps, [5 / 24, 3 / 8, 3 / 4])
    assert predictor_exponent("R1", "strong", 1.5, 1.5, 1.5, R1) == pytest.approx(5 / 24)


def test_r4_weak_predictor_is_gamma():
    for eps in (2**-3, 2**-7):
        assert theoretical_predictor("R4", "weak", 1.5, 1.5, 1.5, R4, eps) == pytest.approx(R4.gamma(eps))


def test_r3_weak_includes_gamma_over_beta():
    labels = dict(predictor_terms("R3", "weak", 1.5, 1.5, 1.5, R3))
    assert labels["gamma/beta"] == pytest.approx(0.25)
    assert predictor_exponent("R3", "weak", 1.5, 1.5, 1.5, R3) == pytest.approx(0.25)


def test_r2_strong_terms():
    labels = dict(predictor_terms("R2", "strong", 1.5, 1.5, 1.5, R2))
    assert "gamma" in labels and "eta/(gamma beta)" not in labels
    assert labels["gamma"] == pytest.approx(0.125)


@pytest.mark.parametrize("v", [1.0, 1.2, 1.5])
def test_strong_bracket_reduces_to_optimal_order(v):
    # v >= (alpha1 - 1) v (alpha2 - 1): third exponent is e (1 - 1/alpha2) - g
    labels = dict(predictor_terms("R1", "strong", 1.5, 1.5, v, R1))
    assert labels["eta^c/gamma"] == pytest.approx(1.0 * (1 - 1 / 1.5) - 0.125)


def test_strong_p_scales_exponents():
    a = predictor_exponent("R1", "strong", 1.5, 1.5, 1.5, R1, p=1.2)
    assert a == pytest.approx(1.2 * 5 / 24)


@pytest.mark.parametrize("regime, schedule", [("R3", R3), ("R4", R4)])
def test_strong_r3_r4_impossible(regime, schedule):
    with pytest.raises(ArgumentError, match="leads to contradictions again"):
        theoretical_predictor(regime, "strong", 1.5, 1.5, 1.5, schedule, 0.1)
    with pytest.raises(ArgumentError, match="contradictions"):
        run_strong_experiment(_config(regime, schedule, model_params={}))


def test_v_out_of_range():
    with pytest.raises(ArgumentError):
        theoretical_predictor("R4", "weak", 1.5, 1.5, 0.5, R4, 0.1)
    with pytest.raises(ArgumentError):
        theoretical_predictor("R1", "strong", 1.5, 1.5, 1.6, R1, 0.1)


# ---------------------------------------------------------------------------
# Configuration


def test_config_validation():
    with pytest.raises(ConfigurationError) as info:
        _config(eps_grid=(0.1, 0.2, 0.05))
    assert info.value.key == "eps_grid"
    with pytest.raises(ConfigurationError) as info:
        _config(reps=301)
    assert info.value.key == "reps"
    with pytest.raises(ConfigurationError) as info:
        _config(p=1.5)
    assert info.value.key == "p"
    with pytest.raises(ConfigurationError):
        _config(regime="R2")  # schedule tagged R1


def test_config_hash_ignores_threads():
    assert _config().config_hash() == _config(threads=3).config_hash()
    assert _config().config_hash() != _config(seed=1).config_hash()


# ---------------------------------------------------------------------------
# Experiments


def _coinciding_model():
    base = make_linear_benchmark()
    fields = {k: getattr(base, k) for k in base.__dataclass_fields__}
    fields.update(b=lambda t, x, y: -x + 0 * y, H=lambda t, x, y: 0 * y)
    return ModelSpec(**fields)


def test_coupling_sanity_zero_error():
    model = _coinciding_model()
    report = run_strong_experiment(_config(), drifts={"bbar": lambda t, x: -x}, model=model)
    np.testing.assert_array_equal(report.column("error"), 0.0)
    assert math.isnan(report.fit().slope)


def test_constant_observable_zero_weak_error():
    report = run_weak_experiment(_config(phi_list=("one",)))
    np.testing.assert_array_equal(report.column("error", "one"), 0.0)


def test_drift_mismatch_rejected():
    model = make_linear_benchmark()
    with pytest.raises(ArgumentError):
        run_strong_experiment(_config("R2", R2), drifts={"bbar": model.analytic.bbar}, model=model)
    report = run_strong_experiment(
        _config("R2", R2), drifts={"bbar": model.analytic.bbar}, model=model, allow_misspecified=True
    )
    assert report.meta["drifts"] == ["bbar"]


def test_strong_report_structure_and_determinism():
    cfg = _config(refine=True)
    a = run_strong_experiment(cfg, n_boot=50)
    b = run_strong_experiment(cfg, n_boot=50)
    c = run_strong_experiment(_config(refine=True, threads=2), n_boot=50)
    assert len(a.rows) == 3 and a.kind == "strong"
    np.testing.assert_array_equal(a.column("error"), b.column("error"))
    np.testing.assert_array_equal(a.column("error"), c.column("error"))
    assert a.fit().slope == b.fit().slope
    assert a.predictor_slope == pytest.approx(5 / 24)
    ref = a.meta["refinement"]
    assert set(ref) >= {"h", "h/2", "eps"}
    # grid-sup surrogate: refining the grid can only add sup candidates
    assert ref["h/2"] > 0 and ref["h"] > 0


def test_halving_reps_widens_ci():
    full = run_strong_experiment(_config(reps=600, eps_grid=(2**-3, 2**-4, 2**-5, 2**-6)), n_boot=200)
    half = run_strong_experiment(_config(reps=300, eps_grid=(2**-3, 2**-4, 2**-5, 2**-6), seed=1), n_boot=200)
    w_full = full.fit().ci[1] - full.fit().ci[0]
    w_half = half.fit().ci[1] - half.fit().ci[0]
    assert w_half > w_full
    assert half.fit().ci[0] <= full.fit().ci[1] and full.fit().ci[0] <= half.fit().ci[1]


def test_weak_report_rows_per_phi():
    report = run_weak_experiment(_config("R4", R4, phi_list=("cos", "tanh")), n_boot=20)
    assert report.stats() == ["cos", "tanh"]
    assert len(report.rows) == 6
    np.testing.assert_allclose(report.column("predictor", "cos"), [R4.gamma(e) for e in (2**-3, 2**-4, 2**-5)])


def test_tabulated_bbar_matches_closed_form():
    model = make_linear_benchmark()
    tab = tabulate_drift(model, "bbar", [0.0, 1.0], [-2.0, 0.0, 2.0], ensemble_n=20_000)
    x = np.array([[-1.0], [0.5], [3.0]])
    np.testing.assert_allclose(tab(0.5, x), model.analytic.bbar(0.5, x), atol=0.05)


# ---------------------------------------------------------------------------
# Aggregation and regression examples


def test_fit_rate_examples():
    eps = 2.0 ** -np.arange(3, 9)
    fit = fit_rate(eps**0.5, eps)
    assert fit.slope == pytest.approx(0.5) and fit.r2 == pytest.approx(1.0)
    fit2 = fit_rate(2 * eps**0.5, eps)
    assert fit2.intercept == pytest.approx(math.log(2))
    bumped = eps**0.5
    bumped[2] *= 1.2
    assert fit_rate(bumped, eps).slope == pytest.approx(0.5, abs=0.05)


def test_median_of_means_examples():
    assert median_of_means(np.arange(1, 10), 3) == 5
    s = np.random.default_rng(0).standard_normal(30)
    assert median_of_means(s, 1) == pytest.approx(s.mean())


def test_median_of_means_stable_heavy_tail():
    # group means of 1000 unit stable(1.5) draws have scale 1000^(-1/3); their median
    # over 30 groups is asymptotically normal with sd 1 / (2 f(0) sqrt(30))
    scale = 1000 ** (1 / 1.5 - 1)
    f0 = stats.levy_stable(1.5, 0.0, scale=scale).pdf(0.0)
    p_hit = 2 * stats.norm.cdf(0.05 * 2 * f0 * math.sqrt(30)) - 1
    hits_mom = hits_mean = 0
    n_rep = 400
    for r in range(n_rep):
        s = stable_increment_1d(1.5, 1.0, 1.0, RngStream(100, r), size=30_000) + 1.0
        hits_mom += abs(median_of_means(s, 30) - 1.0) < 0.05
        hits_mean += abs(s.mean() - 1.0) < 0.05
    sd = math.sqrt(n_rep * p_hit * (1 - p_hit))
    assert abs(hits_mom - n_rep * p_hit) < 4 * sd
    assert hits_mean < hits_mom
