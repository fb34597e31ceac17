"""Explicit jump-Euler time stepping for the coupled, frozen and averaged equations.

Slow and fast drivers are drawn from two fixed substreams of the caller's
:class:`~levyscale.noise.RngStream` (``child(1)`` for L1, ``child(2)`` for
L2), in blocks of :data:`NOISE_BLOCK` steps.  An averaged equation run in
fresh-noise mode with the same stream therefore sees exactly the L1
increments of the coupled run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, BlowUpError, ParameterError
from .model import ModelSpec, ScaleSchedule
from .noise import RngStream, draw_increments

NOISE_BLOCK = 256
BLOWUP_LIMIT = 1e12

REGIME_DRIFTS = {
    "R1": frozenset({"bbar"}),
    "R2": frozenset({"bbar", "cbar"}),
    "R3": frozenset({"bbar", "Hbar"}),
    "R4": frozenset({"bbar", "cbar", "Hbar"}),
}


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise ArgumentError(f"expected an RngStream or integer seed, got {type(rng).__name__}")


class NoiseBlocks:
    """Iterator over per-step increments of shape ``(reps, dim)``."""

    def __init__(self, stream: RngStream, alpha, dim, h, reps, n_steps, shared=False):
        self.gen = stream.generator()
        self.alpha, self.dim, self.h = alpha, dim, h
        self.reps, self.n_steps, self.shared = reps, n_steps, shared

    def __iter__(self):
        done = 0
        width = 1 if self.shared else self.reps
        while done < self.n_steps:
            m = min(NOISE_BLOCK, self.n_steps - done)
            block = draw_increments(self.gen, self.alpha, self.dim, self.h, (m, width))
            for row in block:
                yield np.broadcast_to(row, (self.reps, self.dim)) if self.shared else row
            done += m


def n_steps_for(T, h):
    if not (T > 0 and h > 0):
        raise ParameterError(f"T and h must be positive, got T={T}, h={h}")
    n = int(round(T / h))
    if n < 1 or abs(n * h - T) > 1e-9 * max(T, 1.0):
        raise ArgumentError(f"T/h must be an integer, got T={T}, h={h}")
    return n


def _batch(z, d, reps):
    z = np.asarray(z, dtype=float)
    if z.ndim <= 1:
        z = np.broadcast_to(z.reshape(-1)[:d] if z.size == d else z.reshape(-1), (reps, d))
    if z.shape != (reps, d):
        raise ArgumentError(f"initial data of shape {z.shape} does not match ({reps}, {d})")
    return np.array(z, dtype=float)


def _guard(z, step, what):
    if not np.all(np.abs(z) < BLOWUP_LIMIT):
        raise BlowUpError(f"{what} left the range |.| < {BLOWUP_LIMIT:g} at step {step}", step)


def choose_step(eps, schedule: ScaleSchedule, kappa_cfl=20.0):
    """Step ``h = eta_eps / kappa_cfl`` keeping the fast drift increment O(1/kappa_cfl)."""
    if not kappa_cfl >= 1:
        raise ParameterError(f"kappa_cfl must be at least 1, got {kappa_cfl}")
    return schedule.eta(eps) / kappa_cfl


# ---------------------------------------------------------------------------
# Paths


@dataclass(frozen=True)
class CoupledPath:
    """Trajectory of the coupled system.

    Without ``reps`` the arrays are ``(n_nodes, d)``; with ``reps`` they are
    ``(n_nodes, reps, d)``.  ``l1_increments`` has one row fewer than ``xs``.
    """

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    l1_increments: np.ndarray
    eps: float
    schedule: ScaleSchedule
    seed: tuple
    h: float


@dataclass(frozen=True)
class AveragedPath:
    times: np.ndarray
    xs: np.ndarray
    regime: Optional[str]
    drift_kind: frozenset = field(default_factory=frozenset)


@dataclass(frozen=True)
class FrozenPath:
    times: np.ndarray
    ys: np.ndarray
    x: np.ndarray


def coupled_steps(model: ModelSpec, schedule: ScaleSchedule, eps, x0, y0, T, h, rng, reps=1):
    """Yield ``(k, t_{k+1}, X_{k+1}, Y_{k+1}, dL1_k)`` for each Euler step.

    The state arrays are updated in place between yields; copy them to keep.
    """
    stream = as_stream(rng)
    gamma, eta, beta = schedule.scales(eps)
    if h > eta * (1 + 1e-12):
        raise ParameterError(f"step h={h} exceeds the fast time scale eta={eta}")
    n = n_steps_for(T, h)
    X = _batch(x0, model.d1, reps)
    Y = _batch(y0, model.d2, reps)
    fast_amp = eta ** (-1.0 / model.alpha2)
    l1 = NoiseBlocks(stream.child(1), model.alpha1, model.d1, h, reps, n)
    l2 = NoiseBlocks(stream.child(2), model.alpha2, model.d2, h, reps, n)
    for k, (dL1, dL2) in enumerate(zip(l1, l2)):
        t = k * h
        slow = model.b(t, X, Y) * h + (h / gamma) * model.H(t, X, Y)
        fast = (h / eta) * model.f(X, Y) + (h / beta) * model.c(X, Y) + fast_amp * dL2
        X += slow + dL1
        Y += fast
        _guard(X, k, "slow state")
        _guard(Y, k, "fast state")
        yield k, (k + 1) * h, X, Y, dL1


def simulate_coupled(model, schedule, eps, x0, y0, T, h, rng, reps=None) -> CoupledPath:
    """Full trajectory of the coupled system with the recorded slow increments."""
    stream = as_stream(rng)
    r = 1 if reps is None else int(reps)
    n = n_steps_for(T, h)
    xs = np.empty((n + 1, r, model.d1))
    ys = np.empty((n + 1, r, model.d2))
    l1 = np.empty((n, r, model.d1))
    xs[0] = _batch(x0, model.d1, r)
    ys[0] = _batch(y0, model.d2, r)
    for k, _, X, Y, dL1 in coupled_steps(model, schedule, eps, xs[0], ys[0], T, h, stream, r):
        xs[k + 1] = X
        ys[k + 1] = Y
        l1[k] = dL1
    if reps is None:
        xs, ys, l1 = xs[:, 0], ys[:, 0], l1[:, 0]
    return CoupledPath(
        times=np.arange(n + 1) * h,
        xs=xs,
        ys=ys,
        l1_increments=l1,
        eps=float(eps),
        schedule=schedule,
        seed=(stream.seed, stream.stream_id),
        h=float(h),
    )


def frozen_steps(model: ModelSpec, x, y0, T, h, rng, reps=1, shared_noise=False):
    """Yield ``(k, t_{k+1}, Y_{k+1})`` for dY = f(x, Y) dt + dL2 with x frozen.

    ``x`` may be a single point or a batch of ``reps`` points (one per path).
    """
    stream = as_stream(rng)
    n = n_steps_for(T, h)
    xb = _batch(x, model.d1, reps)
    Y = _batch(y0, model.d2, reps)
    noise = NoiseBlocks(stream.child(2), model.alpha2, model.d2, h, reps, n, shared=shared_noise)
    for k, dL2 in enumerate(noise):
        Y += h * model.f(xb, Y) + dL2
        _guard(Y, k, "frozen state")
        yield k, (k + 1) * h, Y


def simulate_frozen(model, x, y0, T, h, rng, reps=None, shared_noise=False) -> FrozenPath:
    r = 1 if reps is None else int(reps)
    n = n_steps_for(T, h)
    ys = np.empty((n + 1, r, model.d2))
    ys[0] = _batch(y0, model.d2, r)
    for k, _, Y in frozen_steps(model, x, ys[0], T, h, rng, r, shared_noise):
        ys[k + 1] = Y
    if reps is None:
        ys = ys[:, 0]
    return FrozenPath(times=np.arange(n + 1) * h, ys=ys, x=np.asarray(x, dtype=float))


def _check_drift_kind(regime, drift_kind):
    if regime is None or drift_kind is None:
        return frozenset(drift_kind or ())
    kind = frozenset(drift_kind)
    if kind != REGIME_DRIFTS[regime]:
        raise ArgumentError(
            f"regime {regime} needs drifts {sorted(REGIME_DRIFTS[regime])}, got {sorted(kind)}"
        )
    return kind


def averaged_steps(drift: Callable, x0, T, h, l1_increments=None, rng=None, alpha1=None, reps=1, d1=1):
    """Yield ``(k, t_{k+1}, Xbar_{k+1}, dL1_k)`` for dXbar = drift(t, Xbar) dt + dL1."""
    n = n_steps_for(T, h)
    if l1_increments is not None:
        inc = np.asarray(l1_increments, dtype=float)
        if inc.ndim == 2:
            inc = inc[:, None, :]
        if inc.shape[0] != n:
            raise ArgumentError(f"{inc.shape[0]} recorded increments do not match {n} grid steps")
        reps, d1 = inc.shape[1], inc.shape[2]
        source = iter(inc)
    else:
        if rng is None or alpha1 is None:
            raise ArgumentError("fresh-noise mode needs both rng and alpha1")
        source = iter(NoiseBlocks(as_stream(rng).child(1), alpha1, d1, h, reps, n))
    X = _batch(x0, d1, reps)
    for k, dL1 in enumerate(source):
        X += drift(k * h, X) * h + dL1
        _guard(X, k, "averaged state")
        yield k, (k + 1) * h, X, dL1


def simulate_averaged(
    drift: Callable,
    x0,
    T,
    h,
    l1_increments=None,
    rng=None,
    alpha1=None,
    regime=None,
    drift_kind=None,
    reps=None,
    d1=1,
) -> AveragedPath:
    """Euler path of the averaged equation, coupled to recorded increments when given."""
    kind = _check_drift_kind(regime, drift_kind)
    n = n_steps_for(T, h)
    if l1_increments is not None:
        inc = np.asarray(l1_increments, dtype=float)
        single = inc.ndim == 2
        r, d1 = (1, inc.shape[1]) if single else inc.shape[1:]
    else:
        single = reps is None
        r = 1 if reps is None else int(reps)
    xs = np.empty((n + 1, r, d1))
    xs[0] = _batch(x0, d1, r)
    for k, _, X, _ in averaged_steps(drift, xs[0], T, h, l1_increments, rng, alpha1, r, d1):
        xs[k + 1] = X
    if single:
        xs = xs[:, 0]
    return AveragedPath(times=np.arange(n + 1) * h, xs=xs, regime=regime, drift_kind=kind)
