"""Monte Carlo correctors for the nonlocal Poisson equation and the averaged corrector drifts.

The corrector at fixed ``(t, x)`` is the time integral of the centred
semigroup, ``u(y) = int_0^inf (E g(Y_s^{x,y}) - gbar) ds``, truncated at a
horizon derived from the contraction rate and evaluated with a left Riemann
sum along Euler paths of the frozen equation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline

from .errors import (
    ArgumentError,
    ConfigurationError,
    IllConditionedError,
    ModelError,
    NumericalError,
    ParameterError,
    PrerequisiteError,
)
from .integrator import NOISE_BLOCK, _guard, as_stream
from .model import ModelSpec, check_centering
from .noise import draw_increments, levy_measure_constant

DEFAULT_TOL = 1e-3
DEFAULT_REPS = 2000
DEFAULT_H = 0.01
DEFAULT_FD_STEP = 1e-2


@dataclass(frozen=True)
class CorrectorEstimate:
    """Corrector values at a batch of query points ``y`` (shape ``(m, d2)``).

    ``u_value`` and ``se`` have shape ``(m, k)`` for a ``k``-component
    right-hand side; gradients are ``(m, k, d)``.  ``trunc_bound`` bounds the
    neglected tail of the time integral at each query.
    """

    t: float
    x: np.ndarray
    y: np.ndarray
    u_value: np.ndarray
    se: np.ndarray
    horizon: float
    trunc_bound: np.ndarray
    reps: int
    beta_hat: float
    grad_y_u: Optional[np.ndarray] = None
    grad_y_se: Optional[np.ndarray] = None
    grad_x_u: Optional[np.ndarray] = None
    grad_x_se: Optional[np.ndarray] = None
    mode: str = "value"
    grad_y_trunc: Optional[np.ndarray] = None
    grad_x_trunc: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AveragedDrift:
    """One evaluation of an averaged corrector drift at ``(t, x)``."""

    kind: str
    t: float
    x: np.ndarray
    value: np.ndarray
    se: np.ndarray
    trunc_bound: np.ndarray
    n_outer: int
    reps: int
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Right-hand sides


@dataclass(frozen=True)
class _Rhs:
    g: Optional[object]
    grad_y: Optional[object]
    k: int
    zero: bool = False
    centred: bool = True


def _resolve_rhs(model: ModelSpec, rhs) -> _Rhs:
    if rhs is None or (isinstance(rhs, (int, float)) and rhs == 0) or rhs == "0":
        return _Rhs(None, None, model.d1, zero=True)
    if rhs == "H":
        return _Rhs(model.H, model.grad_H_y, model.d1, centred=True)
    if rhs == "b":
        return _Rhs(model.b, model.grad_b_y, model.d1, centred=False)
    if callable(rhs):
        k = int(getattr(rhs, "n_components", model.d1))
        return _Rhs(rhs, getattr(rhs, "grad_y", None), k, centred=bool(getattr(rhs, "centred", True)))
    raise ArgumentError(f"rhs must be 'H', 'b', 0 or a callable, got {rhs!r}")


def horizon_for(y, beta_hat, tol=DEFAULT_TOL):
    """``T = (2 / beta_hat) log((1 + |y|) / tol)`` over the largest query norm."""
    if beta_hat is None:
        raise PrerequisiteError("a contraction estimate beta_hat is required (see ergodics.contraction_diagnostic)")
    if not beta_hat > 0:
        raise ParameterError(f"beta_hat must be positive, got {beta_hat}")
    if not 0 < tol < 1:
        raise ParameterError(f"tol must lie in (0, 1), got {tol}")
    ymax = float(np.max(np.linalg.norm(np.atleast_2d(y), axis=1)))
    return (2.0 / beta_hat) * math.log((1.0 + ymax) / tol)


def _gbar(model, rhs: _Rhs, t, xs, ensemble, rng):
    """Per-query centring constants, shape ``(q, k)``."""
    q = xs.shape[0]
    if rhs.centred:
        return np.zeros((q, rhs.k))
    from .ergodics import sample_invariant

    out = np.empty((q, rhs.k))
    cache = {}
    for i, xi in enumerate(xs):
        key = tuple(xi)
        if key not in cache:
            if ensemble is not None and np.allclose(ensemble.anchor_x, xi, rtol=0, atol=1e-12):
                ens = ensemble
            else:
                ens = sample_invariant(model, xi, n=20_000, rng=as_stream(rng).child(11))
            ys = ens.samples
            vals = rhs.g(t, np.broadcast_to(xi, (ys.shape[0], model.d1)), ys)
            cache[key] = ens.batch_mean(vals)[0]
        out[i] = cache[key]
    return out


# ---------------------------------------------------------------------------
# Core path integrator


def _path_integrals(model, rhs: _Rhs, gbar, t, xs, ys, T, h, stream, reps, groups, beta_hat, flow=False):
    """Per-replicate Riemann sums for ``q`` queries sharing noise within ``groups``.

    Replicates come in antithetic pairs (increments ``dL`` and ``-dL``); the
    returned samples are pair averages, so they are independent.  Returns
    ``(samples (reps // 2, q, k), grads, envelope (q, k))`` where the
    envelope is the largest early value of ``|mean g - gbar| e^{beta_hat s / 2}``
    and ``grads`` is None or, with ``flow``, the pair ``(grad_samples
    (reps // 2, q, k, d2), gradient envelope (q, k, d2))``.
    """
    if reps < 2 or reps % 2:
        raise ParameterError(f"reps must be an even number >= 2 (antithetic pairs), got {reps}")
    half = reps // 2
    q = xs.shape[0]
    d2 = model.d2
    n = int(math.ceil(T / h - 1e-9))
    groups = np.asarray(groups, dtype=int)
    ng = int(groups.max()) + 1
    X = np.tile(xs, (reps, 1))
    Y = np.tile(ys, (reps, 1)).astype(float)
    gb = np.tile(gbar, (reps, 1))
    acc = np.zeros((reps * q, rhs.k))
    env = np.zeros((q, rhs.k))
    t_env = 2.0 / beta_hat
    if flow:
        J = np.tile(np.eye(d2), (reps * q, 1, 1))
        gacc = np.zeros((reps * q, rhs.k, d2))
        genv = np.zeros((q, rhs.k, d2))
    gen = stream.child(2).generator()
    k = 0
    while k < n:
        # full blocks keep the draws prefix-consistent when the horizon grows
        block = draw_increments(gen, model.alpha2, d2, h, (NOISE_BLOCK, half, ng))
        block = np.concatenate([block, -block], axis=1)
        for row in block[: n - k]:
            vals = rhs.g(t, X, Y) - gb
            acc += vals
            s = k * h
            if s <= t_env:
                series = np.abs(vals.reshape(reps, q, rhs.k).mean(axis=0))
                env = np.maximum(env, series * math.exp(0.5 * beta_hat * s))
            if flow:
                gvals = rhs.grad_y(t, X, Y) @ J
                gacc += gvals
                if s <= t_env:
                    gseries = np.abs(gvals.reshape(reps, q, rhs.k, d2).mean(axis=0))
                    genv = np.maximum(genv, gseries * math.exp(0.5 * beta_hat * s))
                J = J + h * (model.grad_f_y(X, Y) @ J)
            Y += h * model.f(X, Y) + row[:, groups].reshape(reps * q, d2)
            _guard(Y, k, "frozen state")
            k += 1
    samples = (h * acc).reshape(2, half, q, rhs.k).mean(axis=0)
    grads = ((h * gacc).reshape(2, half, q, rhs.k, d2).mean(axis=0), genv) if flow else None
    return samples, grads, env


def _mean_se(samples):
    mean = samples.mean(axis=0)
    if samples.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])


def _prepare(model, x, y):
    x = np.asarray(x, dtype=float).reshape(model.d1)
    y = np.asarray(y, dtype=float)
    y = y.reshape(-1, model.d2) if y.ndim <= 1 and y.size % model.d2 == 0 else y.reshape(-1, model.d2)
    return x, y


def _check_ensemble(model, rhs, t, x, ensemble):
    if ensemble is None or rhs.zero or rhs.g is not model.H:
        return
    mean, se = check_centering(model, t, x, ensemble)
    if np.any(np.abs(mean) > 4.0 * se + 1e-3):
        raise ModelError(f"H is not centred under mu^x at x={x}: mean {mean} (se {se})")


# ---------------------------------------------------------------------------
# Public estimators


def estimate_u(
    model: ModelSpec,
    rhs,
    t,
    x,
    y,
    tol=DEFAULT_TOL,
    reps=DEFAULT_REPS,
    h=DEFAULT_H,
    rng=0,
    beta_hat=None,
    ensemble=None,
    horizon=None,
) -> CorrectorEstimate:
    """Corrector ``u(t, x, y)`` for ``rhs`` in ``{'H', 'b', 0}`` or a callable.

    ``y`` may be one point or a batch; all queries share the same driving
    noise (common random numbers).  ``rhs='b'`` is centred with the ensemble
    average; ``rhs='H'`` is assumed centred and checked when an ensemble is
    supplied.
    """
    rhs_ = _resolve_rhs(model, rhs)
    x, ys = _prepare(model, x, y)
    T = horizon_for(ys, beta_hat, tol) if horizon is None else float(horizon)
    if horizon is not None and beta_hat is None:
        raise PrerequisiteError("a contraction estimate beta_hat is required")
    m = ys.shape[0]
    if rhs_.zero:
        zeros = np.zeros((m, rhs_.k))
        return CorrectorEstimate(float(t), x, ys, zeros, zeros.copy(), T, zeros.copy(), int(reps), float(beta_hat))
    _check_ensemble(model, rhs_, t, x, ensemble)
    stream = as_stream(rng)
    xs = np.broadcast_to(x, (m, model.d1))
    gbar = _gbar(model, rhs_, t, xs, ensemble, stream)
    samples, _, env = _path_integrals(
        model, rhs_, gbar, t, xs, ys, T, h, stream, int(reps), np.zeros(m, dtype=int), beta_hat
    )
    mean, se = _mean_se(samples)
    trunc = (2.0 / beta_hat) * env * math.exp(-0.5 * beta_hat * T)
    return CorrectorEstimate(float(t), x, ys, mean, se, T, trunc, int(reps), float(beta_hat))


def _richardson_x(model, rhs_, t, x, ys, tol, h, stream, reps, groups_base, fd_step, beta_hat, ensemble):
    """Richardson-refined central differences in each x direction (CRN across stencils).

    The stencil values are integrated to tolerance ``tol * fd_step`` so the
    truncation error survives division by the step.  Returns per-replicate
    samples of shape ``(n, m, k, d1)``, the raw differences and a truncation
    bound for the refined derivative.
    """
    T = horizon_for(ys + fd_step, beta_hat, tol * fd_step)
    m = ys.shape[0]
    d1 = model.d1
    offsets = []
    for j in range(d1):
        e = np.zeros(d1)
        e[j] = 1.0
        for s in (fd_step, -fd_step, 0.5 * fd_step, -0.5 * fd_step):
            offsets.append(s * e)
    xs = np.concatenate([np.broadcast_to(x + o, (m, d1)) for o in offsets])
    yq = np.tile(ys, (len(offsets), 1))
    groups = np.tile(groups_base, len(offsets))
    gbar = _gbar(model, rhs_, t, xs, ensemble, stream)
    samples, _, env = _path_integrals(model, rhs_, gbar, t, xs, yq, T, h, stream, reps, groups, beta_hat)
    n = samples.shape[0]
    samples = samples.reshape(n, d1, 4, m, rhs_.k)
    d_big = (samples[:, :, 0] - samples[:, :, 1]) / (2 * fd_step)
    d_small = (samples[:, :, 2] - samples[:, :, 3]) / fd_step
    rich = (4.0 * d_small - d_big) / 3.0
    raw = (samples[:, :, 2] - samples[:, :, 3]).transpose(0, 2, 3, 1)
    trunc = (2.0 / beta_hat) * env.reshape(d1, 4, m, rhs_.k).max(axis=1) * math.exp(-0.5 * beta_hat * T)
    return rich.transpose(0, 2, 3, 1), raw, (trunc * 3.0 / fd_step).transpose(1, 2, 0)


def _conditioning(diff_samples, min_snr, what):
    mean, se = _mean_se(diff_samples)
    bad = (se > 0) & (np.abs(mean) < min_snr * se)
    if np.any(bad):
        raise IllConditionedError(
            f"{what}: finite difference {np.abs(mean)[bad].min():.3g} is below {min_snr} x its SE; increase fd_step or reps"
        )


def estimate_grad_u(
    model: ModelSpec,
    rhs,
    t,
    x,
    y,
    mode="flow",
    fd_step=DEFAULT_FD_STEP,
    tol=DEFAULT_TOL,
    reps=DEFAULT_REPS,
    h=DEFAULT_H,
    rng=0,
    beta_hat=None,
    ensemble=None,
    min_snr=10.0,
    check_conditioning=True,
) -> CorrectorEstimate:
    """Gradients of the corrector in ``y`` and ``x``.

    ``mode='flow'`` integrates the derivative flow ``dJ = grad_y f J ds``;
    ``mode='fd'`` uses central differences in ``y``.  The ``x`` gradient is a
    Richardson-refined central difference in both modes because ``x`` also
    moves the invariant law.  All stencils share the same driving noise.
    """
    if mode not in ("flow", "fd"):
        raise ArgumentError(f"mode must be 'flow' or 'fd', got {mode!r}")
    if not fd_step > 0:
        raise ParameterError(f"fd_step must be positive, got {fd_step}")
    rhs_ = _resolve_rhs(model, rhs)
    x, ys = _prepare(model, x, y)
    T = horizon_for(ys + fd_step, beta_hat, tol)
    # fd stencils are integrated to tol * fd_step so their tails survive the division
    T_fd = horizon_for(ys + fd_step, beta_hat, tol * fd_step)
    m, d1, d2, k = ys.shape[0], model.d1, model.d2, rhs_.k
    if rhs_.zero:
        z = np.zeros((m, k))
        gz = np.zeros((m, k, d2))
        xz = np.zeros((m, k, d1))
        return CorrectorEstimate(
            float(t), x, ys, z, z.copy(), T, z.copy(), int(reps), float(beta_hat),
            gz, gz.copy(), xz, xz.copy(), mode, gz.copy(), xz.copy(),
        )
    if mode == "flow" and (model.grad_f_y is None or rhs_.grad_y is None):
        raise ArgumentError("flow mode needs analytic y-Jacobians of f and of the right-hand side")
    _check_ensemble(model, rhs_, t, x, ensemble)
    stream = as_stream(rng)
    reps = int(reps)
    base_groups = np.zeros(m, dtype=int)

    xs = np.broadcast_to(x, (m, d1))
    gbar = _gbar(model, rhs_, t, xs, ensemble, stream)
    if mode == "flow":
        samples, (gsamp, genv), env = _path_integrals(
            model, rhs_, gbar, t, xs, ys, T, h, stream, reps, base_groups, beta_hat, flow=True
        )
        gy, gy_se = _mean_se(gsamp)
        gy_trunc = (2.0 / beta_hat) * genv * math.exp(-0.5 * beta_hat * T)
    else:
        offs = []
        for j in range(d2):
            e = np.zeros(d2)
            e[j] = fd_step
            offs += [e, -e]
        yq = np.concatenate([ys] + [ys + o for o in offs])
        xq = np.broadcast_to(x, (yq.shape[0], d1))
        gq = np.broadcast_to(gbar[:1], (yq.shape[0], k))
        allsamp, _, env_all = _path_integrals(
            model, rhs_, gq, t, xq, yq, T_fd, h, stream, reps, np.zeros(yq.shape[0], dtype=int), beta_hat
        )
        samples, env = allsamp[:, :m], env_all[:m]
        T = T_fd
        pm = allsamp[:, m:].reshape(allsamp.shape[0], d2, 2, m, k)
        penv = env_all[m:].reshape(d2, 2, m, k).max(axis=1)
        gy_trunc = ((2.0 / beta_hat) * penv * math.exp(-0.5 * beta_hat * T_fd) / fd_step).transpose(1, 2, 0)
        diff = pm[:, :, 0] - pm[:, :, 1]
        if check_conditioning:
            _conditioning(diff, min_snr, "y-gradient")
        gy, gy_se = _mean_se((diff / (2 * fd_step)).transpose(0, 2, 3, 1))
    gx_samp, gx_raw, gx_trunc = _richardson_x(
        model, rhs_, t, x, ys, tol, h, stream, reps, base_groups, fd_step, beta_hat, ensemble
    )
    if check_conditioning:
        _conditioning(gx_raw, min_snr, "x-gradient")
    gx, gx_se = _mean_se(gx_samp)
    u, se = _mean_se(samples)
    trunc = (2.0 / beta_hat) * env * math.exp(-0.5 * beta_hat * T)
    return CorrectorEstimate(
        float(t), x, ys, u, se, T, trunc, reps, float(beta_hat), gy, gy_se, gx, gx_se, mode, gy_trunc, gx_trunc
    )


def _stacked_H(model, times):
    """``H`` at several times as one right-hand side with ``d1 * len(times)`` components."""

    def g(_t, X, Y):
        return np.concatenate([model.H(tj, X, Y) for tj in times], axis=1)

    grad = None
    if model.grad_H_y is not None:

        def grad(_t, X, Y):
            return np.concatenate([model.grad_H_y(tj, X, Y) for tj in times], axis=1)

    return _Rhs(g, grad, model.d1 * len(times), centred=True)


def averaged_corrector(
    model: ModelSpec,
    kind,
    t,
    x,
    ensemble,
    n_outer=200,
    reps=200,
    tol=DEFAULT_TOL,
    h=DEFAULT_H,
    rng=0,
    beta_hat=None,
    fd_step=DEFAULT_FD_STEP,
) -> AveragedDrift:
    """Ensemble average of ``c grad_y u`` (``kind='cbar'``) or ``H grad_x u`` (``kind='Hbar'``).

    ``u`` solves the Poisson equation with right-hand side ``H``.  Each of
    ``n_outer`` ensemble states gets its own inner replicates on independent
    noise, so the spread of the per-state products is a valid nested Monte
    Carlo standard error.  ``t`` may be an array of times: the frozen paths
    do not depend on ``t``, so all times share one run and ``value`` gains a
    leading time axis.
    """
    aliases = {"cbar": "cbar", "c̄": "cbar", "Hbar": "Hbar", "H̄": "Hbar"}
    if kind not in aliases:
        raise ArgumentError(f"kind must be 'cbar' or 'Hbar', got {kind!r}")
    kind = aliases[kind]
    if beta_hat is None:
        raise PrerequisiteError("a contraction estimate beta_hat is required")
    x = np.asarray(x, dtype=float).reshape(model.d1)
    if not np.allclose(ensemble.anchor_x, x, rtol=0, atol=1e-12):
        raise ArgumentError(f"ensemble anchored at {ensemble.anchor_x}, not at {x}")
    scalar_t = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    nt = times.size
    stream = as_stream(rng)
    ys = ensemble.subsample(n_outer)
    m, d1 = ys.shape[0], model.d1
    xs = np.broadcast_to(x, (m, d1))
    rhs_ = _stacked_H(model, times)
    prov = {"anchor": x.tolist(), "ensemble_n": ensemble.n, "n_outer": m, "reps": int(reps), "h": h, "tol": tol}

    def finish(value, se, trunc):
        value, se, trunc = (np.asarray(a).reshape(nt, d1) for a in (value, se, trunc))
        if scalar_t:
            value, se, trunc = value[0], se[0], trunc[0]
        tt = float(times[0]) if scalar_t else times
        return AveragedDrift(kind, tt, x, value, se, trunc, m, int(reps), prov)

    if kind == "cbar":
        cvals = model.c(xs, ys)
        if np.all(cvals == 0):
            z = np.zeros(nt * d1)
            return finish(z, z, z)
        if model.grad_f_y is None or rhs_.grad_y is None:
            raise ArgumentError("cbar needs analytic y-Jacobians of f and H")
        T = horizon_for(ys, beta_hat, tol)
        prov["horizon"] = T
        _, (gsamp, genv), _ = _path_integrals(
            model, rhs_, np.zeros((m, rhs_.k)), 0.0, xs, ys, T, h, stream, int(reps), np.arange(m), beta_hat, flow=True
        )
        grad = gsamp.mean(axis=0)  # (m, nt * d1, d2)
        per_state = np.einsum("mkj,mj->mk", grad, cvals)
        env_bound = np.einsum("mkj,mj->mk", genv, np.abs(cvals))
        value, se = _mean_se(per_state)
        trunc = (2.0 / beta_hat) * env_bound.mean(axis=0) * math.exp(-0.5 * beta_hat * T)
        return finish(value, se, trunc)

    gx, _, gx_trunc = _richardson_x(
        model, rhs_, 0.0, x, ys, tol, h, stream, int(reps), np.arange(m), fd_step, beta_hat, ensemble
    )
    grad = gx.mean(axis=0).reshape(m, nt, d1, d1)  # (m, t, component, x-direction)
    Hvals = np.stack([model.H(tj, xs, ys) for tj in times], axis=1)  # (m, nt, d1)
    per_state = np.einsum("mtk,mtkj->mtj", Hvals, grad).reshape(m, nt * d1)
    trunc = np.einsum("mtk,mtkj->tj", np.abs(Hvals), gx_trunc.reshape(m, nt, d1, d1)) / m
    value, se = _mean_se(per_state)
    return finish(value, se, trunc)


# ---------------------------------------------------------------------------
# Fractional Laplacian quadrature (d2 = 1)


@dataclass(frozen=True)
class FractionalLaplacianResult:
    value: float
    inner: float
    middle: float
    tail: float
    tail_bound: float
    quad_error: float

    @property
    def error_bound(self):
        return self.tail_bound + self.quad_error


def _panels(lo, hi, n_panels, order=8):
    """Gauss-Legendre nodes and weights on ``n_panels`` log-spaced panels of [lo, hi]."""
    gx, gw = leggauss(order)
    edges = np.linspace(math.log(lo), math.log(hi), n_panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    s = 0.5 * (b - a) * gx + 0.5 * (a + b)
    w = 0.5 * (b - a) * gw
    return np.exp(s), w


def _middle(fn, y, alpha, inner_cut, outer_cut, n_quad):
    z, w = _panels(inner_cut, outer_cut, n_quad)
    fz = (
        np.asarray(fn(y + z), dtype=float).reshape(z.shape)
        + np.asarray(fn(y - z), dtype=float).reshape(z.shape)
        - 2.0 * float(fn(y))
    )
    # dz / z^{1+alpha} = e^{-alpha s} ds in the log variable
    contrib = (fz * z ** (-alpha) * w).sum(axis=1)
    bad = ~np.isfinite(contrib)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NumericalError(f"non-finite quadrature on panel {i} (z in [{z[i, 0]:.3g}, {z[i, -1]:.3g}])")
    return float(contrib.sum()), z


def fractional_laplacian_1d(
    fn,
    y,
    alpha,
    inner_cut=1e-3,
    outer_cut=50.0,
    n_quad=4096,
    d2fn=None,
    bound=None,
    tail="bounded",
    full_output=False,
):
    """``-(-Delta)^{alpha/2} fn`` at ``y`` by principal-value quadrature.

    Normalised to the symbol ``|u|^alpha``.  The inner ball uses the
    second-order Taylor term with ``d2fn`` (or a central difference).  The
    region beyond ``R = outer_cut`` depends on the declared ``tail``:

    * ``"bounded"``: ``fn(y +- z)`` averages out, leaving ``-2 fn(y)`` with an
      error bound ``2 c sup|fn| R^{-alpha} / alpha`` (``bound`` is
      ``sup|fn|``; estimated from the outermost nodes when omitted);
    * ``"flat"``: ``fn`` is asymptotically affine or constant, so the second
      difference is frozen at its value at ``R``; the bound uses its variation
      over ``[R/2, R]``.
    """
    if tail not in ("bounded", "flat"):
        raise ArgumentError(f"tail must be 'bounded' or 'flat', got {tail!r}")
    if not (1.0 < alpha < 2.0):
        raise ParameterError(f"alpha must lie in (1, 2) for the nonlocal term, got {alpha}")
    if not (0 < inner_cut < outer_cut):
        raise ParameterError("cuts must satisfy 0 < inner_cut < outer_cut")
    if int(n_quad) < 2:
        raise ParameterError("n_quad must be at least 2")
    y = float(y)
    c = levy_measure_constant(alpha, 1)
    fy = float(fn(y))
    if d2fn is not None:
        f2 = float(d2fn(y))
    else:
        s = 1e-3
        f2 = (float(fn(y + s)) - 2.0 * fy + float(fn(y - s))) / s**2
    inner = f2 * inner_cut ** (2.0 - alpha) / (2.0 - alpha)
    middle, z = _middle(fn, y, alpha, inner_cut, outer_cut, int(n_quad))
    coarse, _ = _middle(fn, y, alpha, inner_cut, outer_cut, max(1, int(n_quad) // 2))
    decay = outer_cut ** (-alpha) / alpha
    if tail == "bounded":
        tail = -2.0 * fy * decay
        if bound is None:
            edge = np.concatenate([np.abs(fn(y + z[-8:].ravel())), np.abs(fn(y - z[-8:].ravel()))])
            bound = float(np.max(edge))
        tail_bound = c * 2.0 * bound * decay
    else:
        zz = np.linspace(0.5 * outer_cut, outer_cut, 33)
        second = np.asarray(fn(y + zz), dtype=float) + np.asarray(fn(y - zz), dtype=float) - 2.0 * fy
        tail = float(second[-1]) * decay
        tail_bound = c * float(np.max(np.abs(second - second[-1]))) * decay
    value = c * (inner + middle + tail)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite fractional Laplacian at y={y}")
    if not full_output:
        return value
    return FractionalLaplacianResult(
        value=value,
        inner=c * inner,
        middle=c * middle,
        tail=c * tail,
        tail_bound=tail_bound,
        quad_error=c * abs(middle - coarse),
    )


# ---------------------------------------------------------------------------
# Poisson residual on a 1-d grid


@dataclass(frozen=True)
class ResidualReport:
    y: np.ndarray
    residual: np.ndarray
    budget: np.ndarray
    components: dict

    @property
    def max(self):
        return float(np.max(np.abs(self.residual)))

    @property
    def rms(self):
        return float(np.sqrt(np.mean(self.residual**2)))

    @property
    def worst_ratio(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(self.residual) / self.budget
        r[(self.budget == 0) & (self.residual == 0)] = 0.0
        return float(np.max(r))


def default_residual_grid(span=8.0, step=0.25, far=60.0, n_far=14):
    inner = np.arange(-span, span + 0.5 * step, step)
    outer = np.geomspace(span + 1.0, far, n_far)
    return np.concatenate([-outer[::-1], inner, outer])


def _residual_of(spline, f_vals, H_vals, y_probe, alpha, quad):
    d1s = spline.derivative(1)
    d2s = spline.derivative(2)
    lo, hi = spline.x[0], spline.x[-1]

    def fn(z):
        return spline(np.clip(z, lo, hi))

    out = np.empty(y_probe.size)
    qerr = np.empty(y_probe.size)
    for i, yp in enumerate(y_probe):
        res = fractional_laplacian_1d(fn, yp, alpha, d2fn=d2s, tail="flat", full_output=True, **quad)
        out[i] = res.value + f_vals[i] * float(d1s(yp)) + H_vals[i]
        qerr[i] = res.error_bound
    return out, qerr


def poisson_residual(
    model: ModelSpec,
    t,
    x,
    y_probe=None,
    u_fn=None,
    grid=None,
    reps=DEFAULT_REPS,
    tol=DEFAULT_TOL,
    h=DEFAULT_H,
    rng=0,
    beta_hat=None,
    inner_cut=1e-3,
    outer_cut=50.0,
    n_quad=4096,
    n_batches=20,
) -> ResidualReport:
    """Residual of ``L2 u + H = 0`` on probe points for a 1-d fast variable.

    With ``u_fn`` the supplied corrector is checked directly.  Otherwise
    ``u`` is estimated on ``grid`` (common random numbers across nodes),
    interpolated by a cubic spline and the error budget per probe sums the
    batch-means SE, the quadrature bound, a spline interpolation estimate
    (full versus every-other-node grid), the time-step bias (``h`` versus
    ``2h``) and the truncation bound.
    """
    if model.d2 != 1:
        raise ArgumentError("poisson_residual needs a one-dimensional fast variable")
    y_probe = np.linspace(-4.0, 4.0, 41) if y_probe is None else np.asarray(y_probe, dtype=float).ravel()
    x = np.asarray(x, dtype=float).reshape(model.d1)
    quad = dict(inner_cut=inner_cut, outer_cut=outer_cut, n_quad=n_quad)
    alpha = model.alpha2
    yp2 = y_probe.reshape(-1, 1)
    xs = np.broadcast_to(x, (y_probe.size, model.d1))
    f_vals = model.f(xs, yp2).ravel()
    H_vals = model.H(t, xs, yp2)[:, 0]

    if u_fn is not None:
        vals = np.empty(y_probe.size)
        qerr = np.empty(y_probe.size)
        for i, yp in enumerate(y_probe):
            fn = lambda z: np.asarray(u_fn(z), dtype=float)
            s = 1e-3
            d1 = (float(fn(yp + s)) - float(fn(yp - s))) / (2 * s)
            res = fractional_laplacian_1d(fn, yp, alpha, tail="flat", full_output=True, **quad)
            vals[i] = res.value + f_vals[i] * d1 + H_vals[i]
            qerr[i] = res.error_bound
        return ResidualReport(y_probe, vals, qerr, {"quadrature": qerr})

    grid = default_residual_grid() if grid is None else np.sort(np.asarray(grid, dtype=float).ravel())
    if grid[0] > y_probe.min() - outer_cut or grid[-1] < y_probe.max() + outer_cut:
        raise ConfigurationError(
            f"grid [{grid[0]}, {grid[-1]}] must cover the probes widened by outer_cut={outer_cut}", key="grid"
        )
    if reps % (2 * n_batches):
        raise ArgumentError(f"reps={reps} must be divisible by 2 * n_batches={2 * n_batches}")
    stream = as_stream(rng)
    rhs_ = _resolve_rhs(model, "H")
    ygrid = grid.reshape(-1, 1)
    q = grid.size
    T = horizon_for(ygrid, beta_hat, tol)
    xq = np.broadcast_to(x, (q, model.d1))
    zeros = np.zeros((q, 1))
    groups = np.zeros(q, dtype=int)

    samp_h, _, env = _path_integrals(model, rhs_, zeros, t, xq, ygrid, T, h, stream, reps, groups, beta_hat)
    samp_2h, _, _ = _path_integrals(
        model, rhs_, zeros, t, xq, ygrid, T, 2 * h, stream.child(3), reps, groups, beta_hat
    )
    u_h = samp_h.mean(axis=0)[:, 0]
    u_2h = samp_2h.mean(axis=0)[:, 0]

    r_h, qerr = _residual_of(CubicSpline(grid, u_h), f_vals, H_vals, y_probe, alpha, quad)
    r_2h, _ = _residual_of(CubicSpline(grid, u_2h), f_vals, H_vals, y_probe, alpha, quad)
    keep = np.zeros(q, dtype=bool)
    keep[::2] = True
    keep[-1] = True
    r_coarse, _ = _residual_of(CubicSpline(grid[keep], u_h[keep]), f_vals, H_vals, y_probe, alpha, quad)

    batches = samp_h.reshape(n_batches, -1, q).mean(axis=1)
    r_b = np.stack([_residual_of(CubicSpline(grid, ub), f_vals, H_vals, y_probe, alpha, quad)[0] for ub in batches])
    mc_se = r_b.std(axis=0, ddof=1) / math.sqrt(n_batches)

    interp = np.abs(r_coarse - r_h) / 3.0
    disc = np.abs(r_2h - r_h)
    trunc = (2.0 / beta_hat) * float(env.max()) * math.exp(-0.5 * beta_hat * T)
    # an error in the tabulated centring S(x) shifts H by h(t) * dS
    table = model.aux.get("centering")
    centre = table.se(float(x[0])) * _hscale(model, t) if hasattr(table, "se") else 0.0
    budget = mc_se + qerr + interp + disc + trunc + centre
    comps = {"mc_se": mc_se, "quadrature": qerr, "interpolation": interp, "time_step": disc, "truncation": trunc, "centering": centre}
    return ResidualReport(y_probe, r_h, budget, comps)


def _hscale(model, t):
    h0 = float(model.params.get("h0", 1.0))
    return h0 * (1.0 + 0.5 * math.sin(t))


# ---------------------------------------------------------------------------
# CSV cache


CACHE_FIELDS = ("key", "model_hash", "t", "x", "y", "u_value", "se", "horizon", "trunc_bound", "reps")


def _cache_key(model, rhs, t, x, y, params):
    payload = json.dumps(
        {"model": model.model_hash(), "rhs": str(rhs), "t": float(t), "x": np.ravel(x).tolist(),
         "y": np.ravel(y).tolist(), "params": params},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def cached_estimate_u(cache_dir, model, rhs, t, x, y, **kwargs) -> CorrectorEstimate:
    """:func:`estimate_u` backed by a per-model CSV file in ``cache_dir``."""
    if callable(rhs):
        raise ArgumentError("only named right-hand sides can be cached")
    params = {k: (v.__dict__ if hasattr(v, "__dict__") and not isinstance(v, (int, float)) else v)
              for k, v in kwargs.items() if k != "ensemble"}
    params = json.loads(json.dumps(params, default=str))
    key = _cache_key(model, rhs, t, x, y, params)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"corrector-{model.model_hash()}.csv")
    if os.path.exists(path):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["key"] == key:
                    ys = np.asarray(json.loads(row["y"]), dtype=float).reshape(-1, model.d2)
                    return CorrectorEstimate(
                        float(row["t"]),
                        np.asarray(json.loads(row["x"]), dtype=float),
                        ys,
                        np.asarray(json.loads(row["u_value"]), dtype=float),
                        np.asarray(json.loads(row["se"]), dtype=float),
                        float(row["horizon"]),
                        np.asarray(json.loads(row["trunc_bound"]), dtype=float),
                        int(row["reps"]),
                        float(kwargs.get("beta_hat")),
                    )
    est = estimate_u(model, rhs, t, x, y, **kwargs)
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CACHE_FIELDS)
        if new:
            w.writeheader()
        w.writerow(
            {
                "key": key,
                "model_hash": model.model_hash(),
                "t": repr(est.t),
                "x": json.dumps(est.x.tolist()),
                "y": json.dumps(est.y.tolist()),
                "u_value": json.dumps(est.u_value.tolist()),
                "se": json.dumps(est.se.tolist()),
                "horizon": repr(est.horizon),
                "trunc_bound": json.dumps(est.trunc_bound.tolist()),
                "reps": est.reps,
            }
        )
    return est
