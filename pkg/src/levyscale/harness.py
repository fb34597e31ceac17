"""Strong and weak error experiments against the averaged equation, with rate predictors."""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import ArgumentError, ConfigurationError, ParameterError
from .integrator import REGIME_DRIFTS, _guard, choose_step, coupled_steps
from .model import REGIMES, ModelSpec, ScaleSchedule, make_model
from .noise import RngStream
from .stats import RateFit, fit_rate, median_of_means, mom_spread

__all__ = [
    "ExperimentConfig",
    "ErrorReport",
    "ErrorRow",
    "PHI",
    "analytic_drifts",
    "fit_rate",
    "median_of_means",
    "predictor_exponent",
    "predictor_terms",
    "run_strong_experiment",
    "run_weak_experiment",
    "tabulate_drift",
    "theoretical_predictor",
]

STRONG_IMPOSSIBLE = (
    "strong convergence is not available in {regime}: the fast fluctuation of H/gamma "
    "does not vanish pathwise and the strong averaging argument leads to contradictions again "
    "(see the remark following the corrector regularity theorem); use kind='weak'"
)

CHUNK = 500


# ---------------------------------------------------------------------------
# Theoretical predictors


def _v_range(regime, alpha1, alpha2):
    if regime in ("R1", "R2"):
        return max(alpha1 - alpha2, 0.0), alpha1
    return max(alpha2 / 2.0, (2.0 * alpha1 - alpha2) / 2.0), alpha1


def predictor_terms(regime, kind, alpha1, alpha2, v, schedule: ScaleSchedule, p=1.0):
    """Exponents (in eps) of the terms of the convergence bound.

    Returns a list of ``(label, exponent)``; the bound is the maximum of
    ``eps ** exponent`` over the terms.
    """
    if regime not in REGIMES:
        raise ArgumentError(f"unknown regime {regime!r}")
    if kind not in ("strong", "weak"):
        raise ArgumentError(f"kind must be 'strong' or 'weak', got {kind!r}")
    if kind == "strong" and regime in ("R3", "R4"):
        raise ArgumentError(STRONG_IMPOSSIBLE.format(regime=regime))
    lo, hi = _v_range(regime, alpha1, alpha2)
    if not (lo < v <= hi):
        raise ArgumentError(f"v={v} outside the admissible range ({lo}, {hi}] for {regime}")
    e, g, b = schedule.e, schedule.g, schedule.bexp
    fluct = e * (1.0 - (1.0 - min(1.0, v)) / alpha2) - 2.0 * g
    if regime in ("R1", "R2"):
        if kind == "strong":
            bracket = min(v / alpha2, 1.0 - max(1.0, alpha1 - v) / alpha2)
        else:
            bracket = min(v / alpha2, 1.0 - (alpha1 - v) / alpha2)
        terms = [("eta^a/gamma^2", fluct), ("eta^c/gamma", e * bracket - g)]
        if regime == "R1":
            terms.insert(0, ("eta/(gamma beta)", e - g - b))
        else:
            terms.append(("gamma", g))
    else:
        terms = [("gamma^d", g * (2.0 * v / alpha2 - max(1.0, 2.0 * alpha1 / alpha2 - 1.0)))]
        if regime == "R3":
            terms.append(("gamma/beta", g - b))
    if kind == "strong":
        terms = [(lab, p * ex) for lab, ex in terms]
    return terms


def theoretical_predictor(regime, kind, alpha1, alpha2, v, schedule: ScaleSchedule, eps, p=1.0):
    """Bound ``theta(eps)``: the largest term of the regime's rate expression."""
    terms = predictor_terms(regime, kind, alpha1, alpha2, v, schedule, p)
    return float(max(eps**ex for _, ex in terms))


def predictor_exponent(regime, kind, alpha1, alpha2, v, schedule: ScaleSchedule, p=1.0):
    """Slope of ``log theta`` against ``log eps`` as eps -> 0: the smallest exponent."""
    return float(min(ex for _, ex in predictor_terms(regime, kind, alpha1, alpha2, v, schedule, p)))


# ---------------------------------------------------------------------------
# Test functions for weak errors


@dataclass(frozen=True)
class Observable:
    name: str
    fn: Callable
    sup: float
    sup_d1: float
    sup_d2: float


PHI = {
    "cos": Observable("cos", np.cos, 1.0, 1.0, 1.0),
    "sin": Observable("sin", np.sin, 1.0, 1.0, 1.0),
    "tanh": Observable("tanh", np.tanh, 1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0))),
    "one": Observable("one", lambda x: np.ones_like(x), 1.0, 0.0, 0.0),
}


# ---------------------------------------------------------------------------
# Configuration and reports


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description; see :data:`levyscale.driver.DEFAULTS`."""

    model: str
    regime: str
    schedule: ScaleSchedule
    eps_grid: tuple
    model_params: dict = field(default_factory=dict)
    T: float = 1.0
    p: float = 1.0
    phi_list: tuple = ("cos", "tanh")
    reps: int = 2000
    mom_groups: int = 30
    kappa_cfl: float = 20.0
    seed: int = 0
    checkpoints: tuple = (0.25, 0.5, 0.75, 1.0)
    x0: float = 0.5
    y0: float = 0.5
    threads: int = 1
    refine: bool = True
    drift_source: str = "analytic"

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_grid)
        object.__setattr__(self, "eps_grid", eps)
        object.__setattr__(self, "phi_list", tuple(self.phi_list))
        object.__setattr__(self, "checkpoints", tuple(float(c) for c in self.checkpoints))
        if len(eps) == 0 or any(e <= 0 or e >= 1 for e in eps):
            raise ConfigurationError("eps_grid must hold values in (0, 1)", key="eps_grid")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigurationError("eps_grid must be strictly decreasing", key="eps_grid")
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}", key="regime")
        if self.schedule.regime != self.regime:
            raise ConfigurationError(
                f"schedule is tagged {self.schedule.regime}, experiment is {self.regime}", key="regime"
            )
        if self.reps < 1 or self.mom_groups < 1 or self.reps % self.mom_groups:
            raise ConfigurationError(
                f"reps={self.reps} must be a positive multiple of mom_groups={self.mom_groups}", key="reps"
            )
        alphas = min(self.model_params.get("alpha1", 1.5), self.model_params.get("alpha2", 1.5))
        if not (1.0 <= self.p < alphas):
            raise ConfigurationError("p must be < min(alpha1, alpha2)", key="p")
        if not self.T > 0:
            raise ConfigurationError("T must be positive", key="T")
        if not self.checkpoints or any(not 0 < c <= 1 for c in self.checkpoints):
            raise ConfigurationError("checkpoints must be fractions in (0, 1]", key="checkpoints")
        for name in self.phi_list:
            if name not in PHI:
                raise ConfigurationError(f"unknown observable {name!r}; choose from {sorted(PHI)}", key="phi_list")
        if self.kappa_cfl < 1:
            raise ConfigurationError("kappa_cfl must be at least 1", key="kappa_cfl")
        if int(self.threads) < 1:
            raise ConfigurationError("threads must be at least 1", key="threads")

    def as_dict(self):
        d = asdict(self)
        d["schedule"] = self.schedule.as_dict()
        d["eps_grid"] = list(self.eps_grid)
        d["phi_list"] = list(self.phi_list)
        d["checkpoints"] = list(self.checkpoints)
        return d

    def config_hash(self):
        d = self.as_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def build_model(self) -> ModelSpec:
        return make_model(self.model, **self.model_params)


@dataclass(frozen=True)
class ErrorRow:
    eps: float
    error: float
    spread: float
    predictor: float
    regime: str
    stat: str


@dataclass
class ErrorReport:
    """Per-eps error estimates with fitted and predicted slopes, keyed by ``stat``."""

    kind: str
    regime: str
    rows: list
    fits: dict
    predictor_slope: float
    meta: dict = field(default_factory=dict)

    def stats(self):
        return list(dict.fromkeys(r.stat for r in self.rows))

    def column(self, name, stat=None):
        stat = self.stats()[0] if stat is None else stat
        return np.array([getattr(r, name) for r in self.rows if r.stat == stat])

    def fit(self, stat=None) -> RateFit:
        return self.fits[self.stats()[0] if stat is None else stat]

    def dominance_ratio(self, stat=None):
        """max/min over the grid of error / theta(eps)."""
        ratio = self.column("error", stat) / self.column("predictor", stat)
        return float(ratio.max() / ratio.min())

    def summary(self):
        return {
            "kind": self.kind,
            "regime": self.regime,
            "predictor_slope": self.predictor_slope,
            "fits": {k: asdict(v) for k, v in self.fits.items()},
            "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# Drift providers


def analytic_drifts(model: ModelSpec, regime):
    """Closed-form averaged drifts carried by a benchmark, restricted to the regime."""
    out = {}
    for kind in sorted(REGIME_DRIFTS[regime]):
        fn = getattr(model.analytic, kind)
        if fn is None:
            raise ArgumentError(f"model {model.name!r} has no closed-form {kind}; tabulate it instead")
        out[kind] = fn
    return out


def _check_drifts(regime, drifts, allow_misspecified):
    kinds = frozenset(drifts)
    unknown = kinds - {"bbar", "cbar", "Hbar"}
    if unknown:
        raise ArgumentError(f"unknown drift kinds {sorted(unknown)}")
    if kinds != REGIME_DRIFTS[regime] and not allow_misspecified:
        raise ArgumentError(
            f"regime {regime} needs drifts {sorted(REGIME_DRIFTS[regime])}, got {sorted(kinds)}"
        )


def _compose(drifts, d1):
    fns = [drifts[k] for k in sorted(drifts)]

    def drift(t, x):
        total = np.zeros_like(x)
        for fn in fns:
            total += np.asarray(fn(t, x), dtype=float).reshape(x.shape)
        return total

    return drift


@dataclass(frozen=True)
class TabulatedDrift:
    """Interpolant of an averaged drift on a ``(t, x)`` grid (``d1 = 1``)."""

    kind: str
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    se: np.ndarray
    extrapolate: str = "clamp"

    def __post_init__(self):
        interp = RegularGridInterpolator(
            (self.t_grid, self.x_grid), self.values, bounds_error=False, fill_value=None
        )
        object.__setattr__(self, "_interp", interp)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        xf = x.reshape(-1)
        tt = np.clip(np.full_like(xf, float(t)), self.t_grid[0], self.t_grid[-1])
        if self.extrapolate == "clamp":
            xf = np.clip(xf, self.x_grid[0], self.x_grid[-1])
        return self._interp(np.column_stack([tt, xf])).reshape(x.shape)


def tabulate_drift(
    model: ModelSpec,
    kind,
    t_grid,
    x_grid,
    rng=0,
    ensemble_n=20_000,
    n_outer=2000,
    reps=2,
    beta_hat=None,
    h=0.01,
    tol=1e-3,
) -> TabulatedDrift:
    """Tabulate ``bbar``, ``cbar`` or ``Hbar`` on a grid from ensembles and correctors.

    ``bbar`` extrapolates linearly outside the ``x`` grid; the corrector
    drifts are held constant there.
    """
    from .corrector import averaged_corrector
    from .ergodics import estimate_bbar, estimate_rate, sample_invariant

    if model.d1 != 1:
        raise ArgumentError("tabulate_drift supports one slow dimension")
    if kind not in ("bbar", "cbar", "Hbar"):
        raise ArgumentError(f"kind must be bbar, cbar or Hbar, got {kind!r}")
    stream = RngStream(int(rng)) if not isinstance(rng, RngStream) else rng
    t_grid = np.asarray(t_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    vals = np.empty((t_grid.size, x_grid.size))
    ses = np.empty_like(vals)
    for j, x in enumerate(x_grid):
        rate = estimate_rate(model, x, h=h, rng=stream.child(1000 + j))
        bh = 2.0 * rate if beta_hat is None else beta_hat
        ens = sample_invariant(model, x, n=ensemble_n, h=h, rng=stream.child(j), rate=rate)
        if kind == "bbar":
            for i, t in enumerate(t_grid):
                m, s = estimate_bbar(model, t, x, ens)
                vals[i, j], ses[i, j] = m[0], s[0]
        else:
            res = averaged_corrector(
                model, kind, t_grid, x, ens, n_outer=n_outer, reps=reps, tol=tol, h=h,
                rng=stream.child(2000 + j), beta_hat=bh,
            )
            vals[:, j], ses[:, j] = res.value[:, 0], res.se[:, 0]
    return TabulatedDrift(kind, t_grid, x_grid, vals, ses, "linear" if kind == "bbar" else "clamp")


# ---------------------------------------------------------------------------
# Experiments


def _grid(config: ExperimentConfig, eps, refine=1):
    h0 = choose_step(eps, config.schedule, config.kappa_cfl) / refine
    n = int(math.ceil(config.T / h0 - 1e-9))
    # make every checkpoint land on a grid node
    denom = 1
    for c in config.checkpoints:
        denom = math.lcm(denom, int(round(1.0 / c)) if abs(1.0 / c - round(1.0 / c)) < 1e-9 else 100)
    n = int(math.ceil(n / denom) * denom)
    return config.T / n, n


def _lockstep(model, config, eps, drift, stream, reps, h, n, check_steps, phis):
    """Run coupled and averaged paths on shared L1 increments.

    Returns ``(sup |X - Xbar|^p per replicate, {phi: (reps, n_check, 2)})``.
    """
    X_bar = np.full((reps, model.d1), float(config.x0))
    sup = np.zeros(reps)
    vals = {name: np.empty((reps, len(check_steps), 2)) for name in phis}
    check_index = {s: i for i, s in enumerate(check_steps)}
    for k, t, X, Y, dL1 in coupled_steps(
        model, config.schedule, eps, config.x0, config.y0, config.T, h, stream, reps
    ):
        X_bar += drift(k * h, X_bar) * h + dL1
        _guard(X_bar, k, "averaged state")
        sup = np.maximum(sup, np.linalg.norm(X - X_bar, axis=1))
        i = check_index.get(k + 1)
        if i is not None:
            for name in phis:
                fn = PHI[name].fn
                vals[name][:, i, 0] = fn(X[:, 0])
                vals[name][:, i, 1] = fn(X_bar[:, 0])
    return sup**config.p, vals


def _run_chunks(model, config, eps, drift, eps_index, h, n, phis, reps=None):
    reps = config.reps if reps is None else reps
    check_steps = [int(round(c * n)) for c in config.checkpoints]
    base = RngStream(int(config.seed)).child(eps_index)
    sizes = [min(CHUNK, reps - s) for s in range(0, reps, CHUNK)]

    def job(i):
        return _lockstep(model, config, eps, drift, base.child(i), sizes[i], h, n, check_steps, phis)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=int(config.threads)) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(i) for i in range(len(sizes))]
    # concatenation in chunk order keeps the reduction independent of scheduling
    sup = np.concatenate([p[0] for p in parts])
    vals = {name: np.concatenate([p[1][name] for p in parts]) for name in phis}
    return sup, vals


def _model_and_v(config, model):
    model = config.build_model() if model is None else model
    return model, model.holder.v


def run_strong_experiment(
    config: ExperimentConfig,
    drifts: Optional[Mapping] = None,
    model: Optional[ModelSpec] = None,
    allow_misspecified=False,
    n_boot=400,
) -> ErrorReport:
    """Grid-sup strong error ``E sup_t |X^eps_t - Xbar_t|^p`` across the eps grid.

    ``allow_misspecified`` permits a drift set that does not match the regime
    (for negative controls such as omitting ``cbar`` in R2).
    """
    if config.regime not in ("R1", "R2"):
        raise ArgumentError(STRONG_IMPOSSIBLE.format(regime=config.regime))
    model, v = _model_and_v(config, model)
    drifts = analytic_drifts(model, config.regime) if drifts is None else dict(drifts)
    _check_drifts(config.regime, drifts, allow_misspecified)
    drift = _compose(drifts, model.d1)
    a1, a2 = model.alpha1, model.alpha2
    slope_pred = predictor_exponent(config.regime, "strong", a1, a2, v, config.schedule, config.p)
    rows, samples, timings = [], [], []
    stat = f"p={config.p:g}"
    for i, eps in enumerate(config.eps_grid):
        t0 = time.perf_counter()
        h, n = _grid(config, eps)
        sup, _ = _run_chunks(model, config, eps, drift, i, h, n, ())
        samples.append(sup)
        err = median_of_means(sup, config.mom_groups)
        rows.append(
            ErrorRow(
                eps, err, mom_spread(sup, config.mom_groups),
                theoretical_predictor(config.regime, "strong", a1, a2, v, config.schedule, eps, config.p),
                config.regime, stat,
            )
        )
        timings.append(time.perf_counter() - t0)
    fits = {stat: _fit(rows, samples, config, n_boot, lambda s: median_of_means(s, config.mom_groups))}
    meta = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "wall_time": timings,
        "drifts": sorted(drifts),
    }
    if config.refine:
        meta["refinement"] = _refinement(model, config, drift)
    return ErrorReport("strong", config.regime, rows, fits, slope_pred, meta)


def _refinement(model, config, drift):
    """Smallest-eps strong error at steps h and h/2 (reduced replicates)."""
    eps = config.eps_grid[-1]
    groups = config.mom_groups
    reps = max(groups, (config.reps // 4) // groups * groups)
    out = {"eps": eps, "reps": reps}
    for label, refine in (("h", 1), ("h/2", 2)):
        h, n = _grid(config, eps, refine)
        sup, _ = _run_chunks(model, config, eps, drift, 10_000 + refine, h, n, (), reps)
        out[label] = median_of_means(sup, groups)
    return out


def _fit(rows, samples, config, n_boot, statistic):
    errors = np.array([r.error for r in rows])
    eps = np.array([r.eps for r in rows])
    if len(rows) < 3 or not np.all(errors > 0):
        # identical coupled paths give zero error; no rate to fit
        return RateFit(float("nan"), float("nan"), float("nan"), (float("nan"),) * 2, len(rows))

    def resample(gen):
        return np.array([statistic(s[gen.integers(0, s.shape[0], s.shape[0])]) for s in samples])

    return fit_rate(errors, eps, resample=resample, n_boot=n_boot, rng=config.seed)


def _weak_error(vals, groups):
    """max over checkpoints of |MoM phi(X^eps) - MoM phi(Xbar)| and the paired spread there."""
    best, spread = -1.0, 0.0
    for i in range(vals.shape[1]):
        d = abs(median_of_means(vals[:, i, 0], groups) - median_of_means(vals[:, i, 1], groups))
        if d > best:
            best = d
            spread = mom_spread(vals[:, i, 0] - vals[:, i, 1], groups)
    return best, spread


def run_weak_experiment(
    config: ExperimentConfig,
    drifts: Optional[Mapping] = None,
    model: Optional[ModelSpec] = None,
    allow_misspecified=False,
    n_boot=400,
) -> ErrorReport:
    """Weak error ``max_checkpoints |E phi(X^eps_t) - E phi(Xbar_t)|`` for each observable."""
    model, v = _model_and_v(config, model)
    drifts = analytic_drifts(model, config.regime) if drifts is None else dict(drifts)
    _check_drifts(config.regime, drifts, allow_misspecified)
    drift = _compose(drifts, model.d1)
    a1, a2 = model.alpha1, model.alpha2
    slope_pred = predictor_exponent(config.regime, "weak", a1, a2, v, config.schedule)
    phis = config.phi_list
    rows, per_phi, timings = [], {p: [] for p in phis}, []
    for i, eps in enumerate(config.eps_grid):
        t0 = time.perf_counter()
        h, n = _grid(config, eps)
        _, vals = _run_chunks(model, config, eps, drift, i, h, n, phis)
        theta = theoretical_predictor(config.regime, "weak", a1, a2, v, config.schedule, eps)
        for name in phis:
            per_phi[name].append(vals[name])
            err, spread = _weak_error(vals[name], config.mom_groups)
            rows.append(ErrorRow(eps, err, spread, theta, config.regime, name))
        timings.append(time.perf_counter() - t0)
    fits = {}
    for name in phis:
        sub = [r for r in rows if r.stat == name]
        fits[name] = _fit(sub, per_phi[name], config, n_boot, lambda s: _weak_error(s, config.mom_groups)[0])
    meta = {"config_hash": config.config_hash(), "seed": config.seed, "wall_time": timings, "drifts": sorted(drifts)}
    return ErrorReport("weak", config.regime, rows, fits, slope_pred, meta)
