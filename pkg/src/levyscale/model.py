"""Coefficient models, structural-condition validators and scale schedules.

Coefficient maps are vectorised over a leading batch axis: ``x`` has shape
``(n, d1)``, ``y`` has shape ``(n, d2)`` and ``t`` is a scalar.  ``b`` and
``H`` return ``(n, d1)``, ``f`` and ``c`` return ``(n, d2)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import ArgumentError, ConfigurationError, ModelError, ParameterError, ScheduleError
from .noise import as_generator, draw_increments

REGIMES = ("R1", "R2", "R3", "R4")


@dataclass(frozen=True)
class HolderMeta:
    v: float = 1.5
    gamma: float = 0.5
    theta1: float = 1.0
    theta2: float = 1.0


@dataclass(frozen=True)
class AnalyticTruth:
    """Optional closed-form quantities attached to a benchmark model.

    Every callable takes ``(t, x)`` or ``(t, x, y)`` with the batched shapes
    used by the coefficient maps; ``sample_invariant(x, n, rng)`` returns an
    ``(n, d2)`` draw from the frozen invariant law.
    """

    bbar: Optional[Callable] = None
    cbar: Optional[Callable] = None
    Hbar: Optional[Callable] = None
    u: Optional[Callable] = None
    grad_y_u: Optional[Callable] = None
    grad_x_u: Optional[Callable] = None
    sample_invariant: Optional[Callable] = None


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d1: int
    d2: int
    b: Callable
    H: Callable
    f: Callable
    c: Callable
    alpha1: float = 1.5
    alpha2: float = 1.5
    grad_f_y: Optional[Callable] = None
    grad_H_y: Optional[Callable] = None
    grad_H_x: Optional[Callable] = None
    grad_b_y: Optional[Callable] = None
    holder: HolderMeta = field(default_factory=HolderMeta)
    analytic: AnalyticTruth = field(default_factory=AnalyticTruth)
    params: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        for a in (self.alpha1, self.alpha2):
            if not 1.0 < a <= 2.0:
                raise ParameterError(f"stability indices must lie in (1, 2], got {a}")
        if self.d1 < 1 or self.d2 < 1:
            raise ParameterError("dimensions must be positive")

    def model_hash(self) -> str:
        payload = json.dumps(
            {"name": self.name, "alpha1": self.alpha1, "alpha2": self.alpha2, "params": self.params},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def slow_drift(self, t, x, y, gamma):
        return self.b(t, x, y) + self.H(t, x, y) / gamma


def _as_batch(z, d):
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(1, d) if z.size == d else z.reshape(-1, d)
    elif z.ndim == 0:
        z = z.reshape(1, 1)
    return z


# ---------------------------------------------------------------------------
# Benchmarks


def stable_ou_scale(kappa, alpha):
    """Scale of the stationary law of dZ = -kappa Z dt + dL: cf exp(-|u|^alpha/(kappa alpha))."""
    return 1.0 / (kappa * alpha)


def _stationary_ou_sampler(center, kappa, alpha2):
    def sample(x, n, rng):
        gen = as_generator(rng)
        x = _as_batch(x, 1)
        z = draw_increments(gen, alpha2, 1, stable_ou_scale(kappa, alpha2), (int(n),))
        return center(x)[0] + z

    return sample


def make_linear_benchmark(a=0.5, kappa=1.0, b1=0.4, h0=1.0, c0=0.3, alpha1=1.5, alpha2=1.5, v=None):
    """Affine slow-fast benchmark with closed-form averaged coefficients.

    ``f = -kappa (y - a x)``, ``b = -x + b1 y``, ``H = h(t) (y - a x)`` with
    ``h(t) = h0 (1 + sin(t)/2)`` and constant ``c = c0``.
    """
    if not kappa > 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if abs(b1 * a) >= 1.0:
        raise ConfigurationError(
            f"averaged drift (-1 + b1*a) x is not dissipative for b1*a = {b1 * a}", key="b1"
        )

    def hfun(t):
        return h0 * (1.0 + 0.5 * math.sin(t))

    def b(t, x, y):
        return -x + b1 * y

    def H(t, x, y):
        return hfun(t) * (y - a * x)

    def f(x, y):
        return -kappa * (y - a * x)

    def c(x, y):
        return np.full_like(y, c0, dtype=float)

    def grad_f_y(x, y):
        return np.full((y.shape[0], 1, 1), -kappa)

    def grad_H_y(t, x, y):
        return np.full((y.shape[0], 1, 1), hfun(t))

    def grad_H_x(t, x, y):
        return np.full((y.shape[0], 1, 1), -a * hfun(t))

    def grad_b_y(t, x, y):
        return np.full((y.shape[0], 1, 1), b1)

    analytic = AnalyticTruth(
        bbar=lambda t, x: (-1.0 + b1 * a) * _as_batch(x, 1),
        cbar=lambda t, x: np.full_like(_as_batch(x, 1), c0 * hfun(t) / kappa),
        Hbar=lambda t, x: np.zeros_like(_as_batch(x, 1)),
        u=lambda t, x, y: hfun(t) * (_as_batch(y, 1) - a * _as_batch(x, 1)) / kappa,
        grad_y_u=lambda t, x, y: np.full((_as_batch(y, 1).shape[0], 1, 1), hfun(t) / kappa),
        grad_x_u=lambda t, x, y: np.full((_as_batch(y, 1).shape[0], 1, 1), -a * hfun(t) / kappa),
        sample_invariant=_stationary_ou_sampler(lambda x: a * x, kappa, alpha2),
    )
    params = dict(a=a, kappa=kappa, b1=b1, h0=h0, c0=c0)
    return ModelSpec(
        name="linear",
        d1=1,
        d2=1,
        b=b,
        H=H,
        f=f,
        c=c,
        alpha1=alpha1,
        alpha2=alpha2,
        grad_f_y=grad_f_y,
        grad_H_y=grad_H_y,
        grad_H_x=grad_H_x,
        grad_b_y=grad_b_y,
        holder=HolderMeta(v=alpha1 if v is None else v),
        analytic=analytic,
        params=params,
    )


def sine_corrector_exact(t, x, y, a, kappa, h0, alpha2):
    """Closed-form corrector of the sine benchmark by 1-d quadrature.

    Uses the explicit transition law of the frozen stable OU process; this is
    an oracle independent of the Monte Carlo estimators.
    """
    m = a * math.tanh(float(np.ravel(x)[0]))
    hval = h0 * (1.0 + 0.5 * math.sin(t))
    damp = 1.0 / (kappa * alpha2)

    def integrand(s, yy):
        decay = math.exp(-kappa * s)
        return math.sin(m + decay * (yy - m)) * math.exp(-(1.0 - decay**alpha2) * damp) - math.sin(
            m
        ) * math.exp(-damp)

    out = []
    for yy in np.ravel(y):
        val, _ = integrate.quad(integrand, 0.0, np.inf, args=(float(yy),), limit=400)
        out.append(hval * val)
    return np.asarray(out).reshape(-1, 1)


def sine_centering_exact(x, a, kappa, alpha2):
    """Closed-form mean of sin under the frozen invariant law (test oracle)."""
    return np.sin(a * np.tanh(x)) * math.exp(-1.0 / (kappa * alpha2))


def sine_cbar_exact(t, x, a, kappa, h0, c0, alpha2):
    """Closed-form ``cbar`` of the sine benchmark: ``c0 h(t) cos(m) exp(-1/(kappa alpha2)) / kappa``."""
    m = a * np.tanh(np.asarray(x, dtype=float))
    hval = h0 * (1.0 + 0.5 * math.sin(t))
    return c0 * hval * np.cos(m) * math.exp(-1.0 / (kappa * alpha2)) / kappa


def sine_hbar_exact(t, x, a, kappa, h0, alpha2):
    """Closed-form ``Hbar`` of the sine benchmark by 1-d quadrature (test oracle).

    With ``q = e^{-kappa s}`` and ``sig = 1/(kappa alpha2)`` the invariant
    average of ``H grad_x u`` reduces to
    ``h^2 m'(x) sin m cos m int (1-q) e^{-sig(1-q^a)} (e^{-sig(1+q)^a} - e^{-sig(1+q^a)}) ds``.
    """
    sig = 1.0 / (kappa * alpha2)
    hval = h0 * (1.0 + 0.5 * math.sin(t))

    def integrand(s):
        q = math.exp(-kappa * s)
        return (1.0 - q) * math.exp(-sig * (1.0 - q**alpha2)) * (
            math.exp(-sig * (1.0 + q) ** alpha2) - math.exp(-sig * (1.0 + q**alpha2))
        )

    val, _ = integrate.quad(integrand, 0.0, np.inf, limit=200)
    x = np.asarray(x, dtype=float)
    m = a * np.tanh(x)
    dm = a / np.cosh(x) ** 2
    return hval**2 * dm * np.sin(m) * np.cos(m) * val


def make_sine_benchmark(
    a=0.5,
    kappa=1.0,
    h0=1.0,
    c0=0.3,
    b1=0.4,
    alpha1=1.5,
    alpha2=1.5,
    v=None,
    centering_offset=0.0,
    centering=None,
    seed=0,
):
    """Nonlinear benchmark whose centering holds by construction.

    ``f = -kappa (y - a tanh x)``, ``H = h(t) (sin y - S(x))``,
    ``b = -x + b1 tanh y`` and ``c = c0``; ``S(x)`` is the invariant mean of
    ``sin`` tabulated by the ergodic estimator (``centering``) and
    interpolated.  ``centering_offset`` deliberately shifts ``S`` for
    negative controls.
    """
    if not kappa > 0:
        raise ParameterError(f"kappa must be positive, got {kappa}")
    if centering is None:
        from .ergodics import tabulate_sine_centering

        centering = tabulate_sine_centering(a, kappa, alpha2, seed=seed)

    def hfun(t):
        return h0 * (1.0 + 0.5 * math.sin(t))

    def S(x):
        return centering(x) + centering_offset

    def b(t, x, y):
        return -x + b1 * np.tanh(y)

    def H(t, x, y):
        return hfun(t) * (np.sin(y) - S(x))

    def f(x, y):
        return -kappa * (y - a * np.tanh(x))

    def c(x, y):
        return np.full_like(y, c0, dtype=float)

    def grad_f_y(x, y):
        return np.full((y.shape[0], 1, 1), -kappa)

    def grad_H_y(t, x, y):
        return (hfun(t) * np.cos(y)).reshape(-1, 1, 1)

    def grad_H_x(t, x, y):
        return (-hfun(t) * centering.derivative(x)).reshape(-1, 1, 1)

    def grad_b_y(t, x, y):
        return (b1 / np.cosh(y) ** 2).reshape(-1, 1, 1)

    analytic = AnalyticTruth(
        u=lambda t, x, y: sine_corrector_exact(t, x, y, a, kappa, h0, alpha2),
        sample_invariant=_stationary_ou_sampler(lambda x: a * np.tanh(x), kappa, alpha2),
    )
    params = dict(a=a, kappa=kappa, h0=h0, c0=c0, b1=b1, centering_offset=centering_offset)
    model = ModelSpec(
        name="sine",
        d1=1,
        d2=1,
        b=b,
        H=H,
        f=f,
        c=c,
        alpha1=alpha1,
        alpha2=alpha2,
        grad_f_y=grad_f_y,
        grad_H_y=grad_H_y,
        grad_H_x=grad_H_x,
        grad_b_y=grad_b_y,
        holder=HolderMeta(v=alpha1 if v is None else v),
        analytic=analytic,
        params=params,
        aux={"centering": centering},
    )
    return model


BUILTIN_MODELS = {"linear": make_linear_benchmark, "sine": make_sine_benchmark}


def make_model(name, **params):
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}", key="model")
    return factory(**params)


# ---------------------------------------------------------------------------
# Structural conditions


@dataclass
class ConditionCheck:
    name: str
    constant: float
    flag: str
    n_probes: int
    detail: str
    witness: dict

    def as_dict(self):
        return {
            "name": self.name,
            "constant": self.constant,
            "flag": self.flag,
            "n_probes": self.n_probes,
            "detail": self.detail,
            "witness": self.witness,
        }


@dataclass
class ConditionReport:
    model: str
    n_pairs: int
    radius: float
    checks: list

    def __getitem__(self, name) -> ConditionCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    @property
    def flags(self):
        return {c.name: c.flag for c in self.checks}

    @property
    def worst(self):
        order = {"pass": 0, "warn": 1, "fail": 2}
        return max((c.flag for c in self.checks), key=order.__getitem__)

    def as_dict(self):
        return {
            "model": self.model,
            "n_pairs": self.n_pairs,
            "radius": self.radius,
            "overall": self.worst,
            "checks": [c.as_dict() for c in self.checks],
        }


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"coefficient {name} returned non-finite values on a probe")
    return arr


def _dissipativity(name, ratio, z1, z2, radius, positive_flag):
    """Flag a batch of dissipativity ratios <F(z1)-F(z2), z1-z2>/|z1-z2|^2."""
    worst = int(np.argmax(ratio))
    sup = float(ratio[worst])
    constant = -sup
    scale = max(1.0, float(np.max(np.abs(ratio))))
    witness = {"z1": z1[worst].tolist(), "z2": z2[worst].tolist(), "ratio": sup}
    if sup > 1e-12 * scale:
        return ConditionCheck(name, constant, positive_flag, len(ratio), "positive ratio (anti-dissipative)", witness)
    if constant <= 1e-12 * scale:
        return ConditionCheck(name, constant, "warn", len(ratio), "not strictly dissipative", witness)
    # Weak dissipativity: the contraction constant degrades near the boundary.
    outer = (np.linalg.norm(z1, axis=1) > 0.8 * radius) & (np.linalg.norm(z2, axis=1) > 0.8 * radius)
    inner = ~outer
    if outer.any() and inner.any():
        c_outer = float(-np.max(ratio[outer]))
        c_inner = float(np.median(-ratio[inner]))
        if c_outer < 0.25 * c_inner:
            return ConditionCheck(
                name,
                constant,
                "warn",
                len(ratio),
                f"dissipativity constant decays toward the boundary ({c_outer:.3g} vs {c_inner:.3g})",
                witness,
            )
    return ConditionCheck(name, constant, "pass", len(ratio), "strictly dissipative", witness)


def _pair_ratio(F1, F2, z1, z2):
    dz = z1 - z2
    return np.einsum("ij,ij->i", F1 - F2, dz) / np.einsum("ij,ij->i", dz, dz)


def validate_structural_conditions(model: ModelSpec, probe=None, rng=None) -> ConditionReport:
    """Probe dissipativity, Lipschitz and growth conditions on random point pairs."""
    probe = dict(probe or {})
    n = int(probe.get("n_pairs", 10_000))
    radius = float(probe.get("radius", 5.0))
    t_max = float(probe.get("t_max", 1.0))
    if n < 1:
        raise ArgumentError("n_pairs must be at least 1")
    gen = as_generator(rng)
    d1, d2 = model.d1, model.d2
    x1 = gen.uniform(-radius, radius, (n, d1))
    x2 = gen.uniform(-radius, radius, (n, d1))
    y1 = gen.uniform(-radius, radius, (n, d2))
    y2 = gen.uniform(-radius, radius, (n, d2))
    t1 = float(gen.uniform(0.0, t_max))
    t2 = float(gen.uniform(0.0, t_max))
    th = model.holder

    f_y1 = _finite("f", model.f(x1, y1))
    f_y2 = _finite("f", model.f(x1, y2))
    c_y1 = _finite("c", model.c(x1, y1))
    c_y2 = _finite("c", model.c(x1, y2))
    b_x1 = _finite("b", model.b(t1, x1, y1))
    b_x2 = _finite("b", model.b(t1, x2, y1))
    H_x1 = _finite("H", model.H(t1, x1, y1))
    H_x2 = _finite("H", model.H(t1, x2, y1))

    checks = [
        _dissipativity("dissipativity_f", _pair_ratio(f_y1, f_y2, y1, y2), y1, y2, radius, "fail"),
        # no globally bounded strongly dissipative c exists; report, never fail
        _dissipativity("dissipativity_c", _pair_ratio(c_y1, c_y2, y1, y2), y1, y2, radius, "warn"),
        _dissipativity("dissipativity_b", _pair_ratio(b_x1, b_x2, x1, x2), x1, x2, radius, "fail"),
        _dissipativity("dissipativity_H", _pair_ratio(H_x1, H_x2, x1, x2), x1, x2, radius, "fail"),
    ]

    # Lipschitz ratios: increments in one argument at a time.
    def lip(name, d_out, d_in):
        ratio = np.linalg.norm(d_out, axis=1) / np.maximum(d_in, 1e-300)
        k = int(np.argmax(ratio))
        flag = "pass" if np.isfinite(ratio[k]) else "fail"
        return ConditionCheck(name, float(ratio[k]), flag, n, "sup of increment ratios", {"index": k})

    dy = np.linalg.norm(y1 - y2, axis=1)
    dx = np.linalg.norm(x1 - x2, axis=1)
    b_y2 = _finite("b", model.b(t1, x1, y2))
    H_y2 = _finite("H", model.H(t1, x1, y2))
    f_x2 = _finite("f", model.f(x2, y1))
    c_x2 = _finite("c", model.c(x2, y1))
    dt = abs(t1 - t2) or 1.0
    b_t2 = _finite("b", model.b(t2, x1, y1))
    H_t2 = _finite("H", model.H(t2, x1, y1))
    checks += [
        lip("lipschitz_b_y", b_x1 - b_y2, dy),
        lip("lipschitz_b_x", b_x1 - b_x2, dx**th.theta2),
        lip("lipschitz_b_t", b_x1 - b_t2, np.full(n, dt**th.theta1)),
        lip("lipschitz_H_y", H_x1 - H_y2, dy),
        lip("lipschitz_H_x", H_x1 - H_x2, dx**th.theta2),
        lip("lipschitz_H_t", H_x1 - H_t2, np.full(n, dt**th.theta1)),
        lip("lipschitz_f_y", f_y1 - f_y2, dy),
        lip("lipschitz_f_x", f_y1 - f_x2, dx**th.theta2),
        lip("lipschitz_c_y", c_y1 - c_y2, dy),
        lip("lipschitz_c_x", c_y1 - c_x2, dx**th.theta2),
    ]

    # Growth envelopes with the integrable process K_t taken as the constant 1.
    def envelope(name, vals, norms, inner_mask, kind):
        mags = np.linalg.norm(vals, axis=1)
        if kind == "bounded":
            full = float(np.max(mags))
            half = float(np.max(mags[inner_mask])) if inner_mask.any() else full
            flag = "warn" if full > 1.5 * max(half, 1e-12) else "pass"
            detail = "bounded envelope" if flag == "pass" else "envelope grows with the probe radius"
            return ConditionCheck(name, full / 2.0, flag, n, detail, {"sup_half_box": half, "sup_box": full})
        ratio = mags / np.maximum(norms, 1e-12)
        return ConditionCheck(name, float(np.max(ratio)), "pass", n, "linear growth envelope", {})

    inner_mask = (np.max(np.abs(x1), axis=1) <= radius / 2) & (np.max(np.abs(y1), axis=1) <= radius / 2)
    xy_norm = np.linalg.norm(x1, axis=1) + np.linalg.norm(y1, axis=1)
    checks += [
        envelope("growth_b", b_x1, xy_norm, inner_mask, "bounded"),
        envelope("growth_H", H_x1, xy_norm, inner_mask, "bounded"),
        envelope("growth_f", f_y1, xy_norm, inner_mask, "linear"),
        envelope("growth_c", c_y1, xy_norm, inner_mask, "bounded"),
    ]
    return ConditionReport(model.name, n, radius, checks)


# ---------------------------------------------------------------------------
# Scale schedules


@dataclass(frozen=True)
class ScaleSchedule:
    """Power-law scales ``gamma = eps**g``, ``eta = eps**e``, ``beta = eps**bexp``."""

    regime: str
    e: float
    g: float
    bexp: float

    def gamma(self, eps):
        return eps**self.g

    def eta(self, eps):
        return eps**self.e

    def beta(self, eps):
        return eps**self.bexp

    def scales(self, eps):
        return self.gamma(eps), self.eta(eps), self.beta(eps)

    def as_dict(self):
        return {"regime": self.regime, "e": self.e, "g": self.g, "b": self.bexp}


_TOL = 1e-12


def schedule_violations(regime, e, g, bexp, alpha2, v):
    """``(key, relation)`` pairs for every violated defining relation."""
    out = []
    for key, val in (("e", e), ("g", g), ("b", bexp)):
        if val < 0:
            out.append((key, f"exponent {key} must be nonnegative"))
    if not e > bexp + _TOL:
        out.append(("e", "eta/beta < 1 requires e > b"))
    fluct = e * (1.0 - (1.0 - min(1.0, v)) / alpha2)
    if regime in ("R1", "R2"):
        if not fluct > 2 * g + _TOL:
            out.append(("g", f"{regime} requires e*(1-(1-min(1,v))/alpha2) > 2g"))
        if regime == "R1" and not e > g + bexp + _TOL:
            out.append(("e", "R1 requires e > g + b"))
        if regime == "R2" and abs(e - (g + bexp)) > _TOL:
            out.append(("e", "R2 requires e = g + b"))
    elif regime in ("R3", "R4"):
        if abs(e - 2 * g) > _TOL:
            out.append(("e", f"{regime} requires e = 2g"))
        if regime == "R3" and not g > bexp + _TOL:
            out.append(("b", "R3 requires g > b"))
        if regime == "R4" and abs(bexp - g) > _TOL:
            out.append(("b", "R4 requires bexp = g"))
    else:
        out.append(("regime", f"unknown regime {regime!r}"))
    return out


def make_schedule(regime, e, g, bexp, alpha2=1.5, v=1.5) -> ScaleSchedule:
    """Validated :class:`ScaleSchedule`; raises :class:`ScheduleError` naming the violated relation."""
    bad = schedule_violations(regime, e, g, bexp, alpha2, v)
    if bad:
        raise ScheduleError("; ".join(msg for _, msg in bad), key=bad[0][0])
    return ScaleSchedule(regime, float(e), float(g), float(bexp))


DEFAULT_SCHEDULES = {
    "R1": (1.0, 0.125, 0.5),
    "R2": (0.625, 0.125, 0.5),
    "R3": (1.0, 0.5, 0.25),
    "R4": (1.0, 0.5, 0.5),
}


# ---------------------------------------------------------------------------
# Centering


def check_centering(model: ModelSpec, t, x, ensemble):
    """Ensemble mean of ``H(t, x, .)`` with a batch-means standard error."""
    x = np.asarray(x, dtype=float).reshape(model.d1)
    if not np.allclose(ensemble.anchor_x, x, rtol=0, atol=1e-12):
        raise ArgumentError(f"ensemble anchored at {ensemble.anchor_x}, not at {x}")
    ys = ensemble.samples
    vals = model.H(t, np.broadcast_to(x, (ys.shape[0], model.d1)), ys)
    return ensemble.batch_mean(vals)
