"""Symmetric alpha-stable driving noise.

All samplers are normalised to the characteristic function
``exp(-dt * scale * |u|**alpha)``, i.e. to the Levy measure
``c_{alpha,d} |z|^{-d-alpha} dz`` with the constant returned by
:func:`levy_measure_constant`.  The fractional Laplacian quadrature in
:mod:`levyscale.corrector` uses the same constant, so samplers, generators
and closed-form benchmarks agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, CapacityError, ParameterError

#: Largest number of scalar draws a single :func:`increment_sequence` call may allocate.
MAX_SAMPLES = 2**28


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Every call to :meth:`generator` returns a fresh Philox generator
    positioned at the start of the stream, so a stream behaves like a value:
    passing the same stream twice replays the same draws.
    """

    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= int(value) < 2**64:
                raise ParameterError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[int(self.seed), int(self.stream_id)]))

    def child(self, index: int) -> "RngStream":
        """Independent substream; children of distinct indices never collide."""
        mixed = np.random.SeedSequence([int(self.seed), int(self.stream_id), int(index)])
        return RngStream(self.seed, int(mixed.generate_state(1, np.uint64)[0]))


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngStream`, a numpy Generator or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngStream(0 if rng is None else int(rng)).generator()
    raise ArgumentError(f"cannot build a generator from {type(rng).__name__}")


@dataclass(frozen=True)
class StableNoiseSpec:
    alpha: float
    dim: int = 1
    scale: float = 1.0

    def __post_init__(self):
        _check_alpha(self.alpha)
        if int(self.dim) != self.dim or self.dim < 1:
            raise ParameterError(f"dim must be a positive integer, got {self.dim}")
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")

    @property
    def gaussian_limit(self) -> bool:
        return self.alpha == 2.0


def _check_alpha(alpha):
    if not (1.0 < alpha <= 2.0):
        raise ParameterError(f"stability index must lie in (1, 2], got {alpha}")


def _check_positive(name, value):
    if not value > 0 or not math.isfinite(value):
        raise ParameterError(f"{name} must be positive and finite, got {value}")


def levy_measure_constant(alpha: float, dim: int = 1) -> float:
    """``c_{alpha,d}`` such that ``c |z|^{-d-alpha}`` has symbol ``|u|^alpha``."""
    return (
        alpha
        * 2.0 ** (alpha - 1.0)
        * math.gamma((alpha + dim) / 2.0)
        / (math.pi ** (dim / 2.0) * math.gamma(1.0 - alpha / 2.0))
    )


def _cms_standard(gen, alpha, shape):
    # Chambers-Mallows-Stuck, symmetric case; cf exp(-|u|^alpha).
    v = gen.uniform(-0.5 * np.pi, 0.5 * np.pi, size=shape)
    w = gen.standard_exponential(size=shape)
    if alpha == 2.0:
        return 2.0 * np.sin(v) * np.sqrt(w)
    return (
        np.sin(alpha * v)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha)
    )


def positive_stable(gen, rho, shape):
    """Kanter's sampler: totally skewed ``rho``-stable with Laplace transform exp(-lam**rho)."""
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho}")
    u = gen.uniform(0.0, np.pi, size=shape)
    e = gen.standard_exponential(size=shape)
    a = (
        np.sin(rho * u) ** (rho / (1.0 - rho))
        * np.sin((1.0 - rho) * u)
        / np.sin(u) ** (1.0 / (1.0 - rho))
    )
    return (a / e) ** ((1.0 - rho) / rho)


def draw_increments(gen, alpha, dim, dt, shape=(), scale=1.0):
    """Array of shape ``shape + (dim,)`` of independent isotropic increments."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    amp = (dt * scale) ** (1.0 / alpha)
    if dim == 1:
        return amp * _cms_standard(gen, alpha, shape + (1,))
    if alpha == 2.0:
        return amp * np.sqrt(2.0) * gen.standard_normal(size=shape + (dim,))
    # Subordination: S has Laplace exponent 2^{alpha/2} lam^{alpha/2}, so
    # sqrt(S) * N(0, I) has symbol |u|^alpha.
    subordinator = 2.0 * positive_stable(gen, alpha / 2.0, shape + (1,))
    return amp * np.sqrt(subordinator) * gen.standard_normal(size=shape + (dim,))


def stable_increment_1d(alpha: float, scale: float, dt: float, rng, size=None):
    """One-dimensional symmetric alpha-stable increment over ``dt``.

    Returns a float when ``size`` is None, otherwise an array of that shape.
    """
    _check_alpha(alpha)
    _check_positive("scale", scale)
    _check_positive("dt", dt)
    gen = as_generator(rng)
    shape = () if size is None else size
    out = (dt * scale) ** (1.0 / alpha) * _cms_standard(gen, alpha, shape)
    return float(out) if size is None else out


def isotropic_stable_increment(alpha: float, dim: int, dt: float, rng, size=None):
    """Isotropic increment in ``R^dim`` with characteristic function exp(-dt|u|^alpha)."""
    spec = StableNoiseSpec(alpha, dim)
    _check_positive("dt", dt)
    gen = as_generator(rng)
    if size is None:
        return draw_increments(gen, spec.alpha, spec.dim, dt, ())
    return draw_increments(gen, spec.alpha, spec.dim, dt, size)


def increment_sequence(spec: StableNoiseSpec, n_steps: int, dt: float, rng) -> np.ndarray:
    """``(n_steps, dim)`` matrix of independent increments; replayable from ``rng``."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ParameterError(f"n_steps must be a positive integer, got {n_steps}")
    _check_positive("dt", dt)
    if n_steps * spec.dim > MAX_SAMPLES:
        raise CapacityError(
            f"{n_steps} x {spec.dim} increments exceed the capacity of {MAX_SAMPLES} draws"
        )
    return draw_increments(as_generator(rng), spec.alpha, spec.dim, dt, (int(n_steps),), spec.scale)


def empirical_cf_check(samples, u_grid, alpha: float, dt: float) -> float:
    """Max deviation of the empirical real characteristic function from exp(-dt|u|^alpha)."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ArgumentError("empirical_cf_check needs at least one sample")
    u = np.atleast_1d(np.asarray(u_grid, dtype=float))
    if u.size == 0:
        raise ArgumentError("u_grid is empty")
    ecf = np.array([np.cos(ui * samples).mean() for ui in u])
    return float(np.max(np.abs(ecf - np.exp(-dt * np.abs(u) ** alpha))))
