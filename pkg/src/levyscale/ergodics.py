"""Invariant measures of the frozen equation and their diagnostics."""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ArgumentError, ParameterError
from .integrator import as_stream, choose_step, coupled_steps, frozen_steps, n_steps_for
from .model import ModelSpec, ScaleSchedule
from .stats import median_of_means, mom_spread

DEFAULT_TOL = 1e-3
DEFAULT_N = 100_000
DEFAULT_THIN = 10
DEFAULT_H = 0.01
DEFAULT_CHAINS = 100


def batch_means(values, n_batches):
    """Mean and batch-means standard error of ``values`` (rows ordered by batch)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0] - values.shape[0] % n_batches
    if n_batches < 2 or n < n_batches:
        raise ArgumentError(f"need at least {n_batches} >= 2 rows for batch means")
    means = values[:n].reshape(n_batches, -1, values.shape[1]).mean(axis=1)
    if np.all(np.ptp(values, axis=0) == 0):
        return values[0].copy(), np.zeros(values.shape[1])
    return means.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(n_batches)


@dataclass(frozen=True)
class FrozenEnsemble:
    """States of the frozen dynamics sampled after burn-in.

    ``samples`` is chain-major: rows ``[i * per_chain, (i + 1) * per_chain)``
    come from chain ``i``.  With ``antithetic`` the chains come in pairs
    driven by opposite increments and batches never split a pair.
    """

    anchor_x: np.ndarray
    samples: np.ndarray
    burn_in: float
    thin: int
    h: float
    chains: int = 1
    antithetic: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples.shape[0] == 0:
            raise ArgumentError("an ensemble needs at least one sample")
        object.__setattr__(self, "anchor_x", np.array(self.anchor_x, dtype=float).reshape(-1))
        self.anchor_x.setflags(write=False)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def n_batches(self):
        units = self.chains // 2 if self.antithetic else self.chains
        if units >= 10:
            return units
        return 20

    def _batched(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if self.antithetic:
            # interleave the two members of each pair so a batch holds whole pairs
            per = self.n // self.chains
            v = values.reshape(self.chains // 2, 2, per, -1).transpose(0, 2, 1, 3)
            values = v.reshape(self.n, -1)
        return values

    def batch_mean(self, values):
        """Mean of per-sample ``values`` with a batch-means standard error."""
        return batch_means(self._batched(values), self.n_batches)

    def ess(self):
        mean, se = self.batch_mean(self.samples[:, :1])
        var = float(np.var(self.samples[:, 0]))
        return float(var / se[0] ** 2) if se[0] > 0 else float(self.n)

    def subsample(self, m, rng=None):
        """``m`` states spread evenly over the ensemble (deterministic)."""
        idx = np.linspace(0, self.n - 1, int(m)).round().astype(int)
        return self.samples[idx]

    def to_csv(self, path):
        header = json.dumps(
            {
                "anchor_x": self.anchor_x.tolist(),
                "burn_in": self.burn_in,
                "thin": self.thin,
                "h": self.h,
                "chains": self.chains,
                "antithetic": self.antithetic,
                "meta": self.meta,
            },
            sort_keys=True,
        )
        cols = ",".join(f"y{i}" for i in range(self.samples.shape[1]))
        with open(path, "w") as fh:
            fh.write(f"# {header}\n{cols}\n")
            for row in self.samples:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            first = fh.readline()
        if not first.startswith("# "):
            raise ArgumentError(f"{path} lacks the ensemble metadata line")
        meta = json.loads(first[2:])
        samples = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        return cls(
            anchor_x=np.asarray(meta["anchor_x"]),
            samples=samples,
            burn_in=meta["burn_in"],
            thin=meta["thin"],
            h=meta["h"],
            chains=meta["chains"],
            antithetic=meta["antithetic"],
            meta=meta.get("meta", {}),
        )


@dataclass(frozen=True)
class ContractionResult:
    times: np.ndarray
    log_distance: np.ndarray
    rate: float

    @property
    def beta_hat(self):
        return 2.0 * self.rate


def contraction_diagnostic(model: ModelSpec, x, y1, y2, T=5.0, h=DEFAULT_H, rng=0) -> ContractionResult:
    """Distance between two frozen paths driven by the same noise.

    Returns the log-distance series and its least-squares decay rate, which
    estimates half the contraction exponent of the frozen dynamics.
    """
    y1 = np.asarray(y1, dtype=float).reshape(model.d2)
    y2 = np.asarray(y2, dtype=float).reshape(model.d2)
    if np.array_equal(y1, y2):
        raise ArgumentError("contraction needs distinct initial points")
    n = n_steps_for(T, h)
    logd = np.empty(n + 1)
    logd[0] = math.log(np.linalg.norm(y1 - y2))
    for k, _, Y in frozen_steps(model, x, np.stack([y1, y2]), T, h, rng, reps=2, shared_noise=True):
        d = float(np.linalg.norm(Y[0] - Y[1]))
        logd[k + 1] = math.log(d) if d > 1e-280 else -np.inf
    times = np.arange(n + 1) * h
    ok = np.isfinite(logd)
    if ok.sum() < 2:
        raise ArgumentError("distance collapsed before a rate could be fitted")
    slope = np.polyfit(times[ok], logd[ok], 1)[0]
    return ContractionResult(times=times, log_distance=logd, rate=float(-slope))


def estimate_rate(model: ModelSpec, x, h=DEFAULT_H, rng=0) -> float:
    """Convenience: contraction rate from the pair (0, 1) at ``x``."""
    y0 = np.zeros(model.d2)
    y1 = np.ones(model.d2)
    return contraction_diagnostic(model, x, y0, y1, T=5.0, h=h, rng=rng).rate


def default_burn_in(rate, tol=DEFAULT_TOL):
    if not rate > 0:
        raise ParameterError(f"contraction rate must be positive, got {rate}")
    return math.log(1.0 / tol) / rate


def sample_invariant(
    model: ModelSpec,
    x,
    burn_in=None,
    n=DEFAULT_N,
    thin=DEFAULT_THIN,
    h=DEFAULT_H,
    rng=0,
    chains=DEFAULT_CHAINS,
    antithetic=False,
    rate=None,
    tol=DEFAULT_TOL,
    y0=None,
) -> FrozenEnsemble:
    """Birkhoff sampling of the frozen invariant measure at ``x``.

    Runs ``chains`` frozen trajectories, discards ``burn_in`` time units and
    keeps every ``thin``-th state; ``ceil(n / chains)`` states per chain.
    ``burn_in=None`` uses ``(2 / beta_hat) log(1 / tol)`` with the measured
    contraction rate.
    """
    if n < 1 or thin < 1 or chains < 1:
        raise ParameterError("n, thin and chains must be positive")
    if antithetic and chains % 2:
        raise ParameterError("antithetic sampling needs an even number of chains")
    stream = as_stream(rng)
    x = np.asarray(x, dtype=float).reshape(model.d1)
    if burn_in is None:
        if rate is None:
            rate = estimate_rate(model, x, h=h, rng=stream.child(7))
        burn_in = default_burn_in(rate, tol)
    if burn_in < 0:
        raise ParameterError("burn_in must be nonnegative")
    per_chain = -(-int(n) // chains)
    burn_steps = int(math.ceil(burn_in / h - 1e-9))
    total = burn_steps + per_chain * thin
    start = np.zeros((chains, model.d2)) if y0 is None else np.broadcast_to(y0, (chains, model.d2))
    out = np.empty((per_chain, chains, model.d2))
    base = chains // 2 if antithetic else chains
    j = 0
    for k, _, Y in _frozen_pairs(model, x, start, total * h, h, stream, base, antithetic):
        step = k + 1 - burn_steps
        if step > 0 and step % thin == 0:
            out[j] = Y
            j += 1
    samples = out.transpose(1, 0, 2).reshape(chains * per_chain, model.d2)
    return FrozenEnsemble(
        anchor_x=x,
        samples=samples,
        burn_in=float(burn_steps * h),
        thin=int(thin),
        h=float(h),
        chains=int(chains),
        antithetic=bool(antithetic),
        meta={"seed": [stream.seed, stream.stream_id], "model": model.name},
    )


def _frozen_pairs(model, x, start, T, h, stream, base, antithetic):
    """Frozen steps for ``base`` chains, optionally mirrored with negated noise."""
    if not antithetic:
        yield from frozen_steps(model, x, start, T, h, stream, reps=base)
        return
    from .integrator import NoiseBlocks, _guard

    n = n_steps_for(T, h)
    xb = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1, model.d1)[:1], (2 * base, model.d1))
    Y = np.array(start, dtype=float)
    noise = NoiseBlocks(stream.child(2), model.alpha2, model.d2, h, base, n)
    for k, dL in enumerate(noise):
        # pair i occupies chains 2i and 2i+1
        inc = np.stack([dL, -dL], axis=1).reshape(2 * base, model.d2)
        Y += h * model.f(xb, Y) + inc
        _guard(Y, k, "frozen state")
        yield k, (k + 1) * h, Y


def estimate_bbar(model: ModelSpec, t, x, ensemble: FrozenEnsemble):
    """Ensemble average of ``b(t, x, .)`` with a batch-means standard error."""
    x = np.asarray(x, dtype=float).reshape(model.d1)
    if not np.allclose(ensemble.anchor_x, x, rtol=0, atol=1e-12):
        raise ArgumentError(f"ensemble anchored at {ensemble.anchor_x}, not at {x}")
    ys = ensemble.samples
    vals = model.b(t, np.broadcast_to(x, (ys.shape[0], model.d1)), ys)
    return ensemble.batch_mean(vals)


@dataclass(frozen=True)
class MixingResult:
    times: np.ndarray
    series: np.ndarray
    se: np.ndarray
    stationary: float
    stationary_se: float
    rate: float
    C: float
    dominated: bool

    def envelope(self, y_norm):
        return self.C * np.exp(-self.rate * self.times) * (1.0 + y_norm)


def mixing_diagnostic(
    model: ModelSpec,
    g,
    x,
    y,
    T=5.0,
    reps=1000,
    h=DEFAULT_H,
    rng=0,
    ensemble=None,
    lip=1.0,
    rate=None,
    record_every=10,
) -> MixingResult:
    """Decay of ``|E g(Y_t^{x,y}) - mu^x(g)|`` against the exponential envelope.

    The envelope constant is fitted at ``t = 0``; ``dominated`` reports
    whether the envelope bounds the whole series up to 3 standard errors.
    """
    if reps < 100:
        raise ParameterError("mixing_diagnostic needs at least 100 replicates")
    stream = as_stream(rng)
    x = np.asarray(x, dtype=float).reshape(model.d1)
    y = np.asarray(y, dtype=float).reshape(model.d2)
    if rate is None:
        rate = estimate_rate(model, x, h=h, rng=stream.child(7))
    if ensemble is None:
        ensemble = sample_invariant(model, x, n=20_000, h=h, rng=stream.child(8), rate=rate)
    g_inf, g_inf_se = ensemble.batch_mean(np.asarray(g(ensemble.samples), dtype=float).reshape(ensemble.n, -1))
    g_inf, g_inf_se = float(g_inf[0]), float(g_inf_se[0])

    def stats(Y):
        vals = np.asarray(g(Y), dtype=float).reshape(reps)
        if np.ptp(vals) == 0:
            return float(vals[0]), 0.0
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(reps))

    times, means, ses = [0.0], [], []
    m0, s0 = stats(np.broadcast_to(y, (reps, model.d2)))
    means.append(m0)
    ses.append(s0)
    for k, t, Y in frozen_steps(model, x, y, T, h, stream.child(9), reps=reps):
        if (k + 1) % record_every == 0:
            m, s = stats(Y)
            times.append(t)
            means.append(m)
            ses.append(s)
    times = np.asarray(times)
    series = np.abs(np.asarray(means) - g_inf)
    se = np.hypot(np.asarray(ses), g_inf_se)
    y_norm = float(np.linalg.norm(y))
    C = float(series[0] / (lip * (1.0 + y_norm)))
    env = C * lip * np.exp(-rate * times) * (1.0 + y_norm)
    dominated = bool(np.all(series <= env + 3.0 * se))
    return MixingResult(times, series, se, g_inf, g_inf_se, float(rate), C * lip, dominated)


# ---------------------------------------------------------------------------
# Moment scans


@dataclass
class MomentTable:
    p: float
    rows: list
    eta: dict

    def column(self, key, t=None):
        rows = [r for r in self.rows if t is None or r["t"] == t]
        return np.array([r[key] for r in rows])

    def ratio(self, key, t=None):
        col = self.column(key, t)
        return float(col.max() / col.min())

    def sup_slope(self):
        """Slope of log E sup|Y|^p against log eta (expected near -p/alpha2)."""
        rows = [r for r in self.rows if r["t"] == max(r2["t"] for r2 in self.rows)]
        eta = np.array([self.eta[r["eps"]] for r in rows])
        vals = np.array([r["sup_y"] for r in rows])
        return float(np.polyfit(np.log(eta), np.log(vals), 1)[0])


def uniform_moment_scan(
    model: ModelSpec,
    schedule: ScaleSchedule,
    eps_list,
    p=1.0,
    T=1.0,
    reps=2000,
    rng=0,
    mom_groups=20,
    kappa_cfl=20.0,
    x0=0.5,
    y0=0.5,
) -> MomentTable:
    """Median-of-means moments of the coupled system across an eps grid.

    Rows hold ``E|X_t|^p``, ``E|Y_t|^p`` at ``t in {T/2, T}`` and the grid
    supremum ``E sup_{s<=t} |Y_s|^p``.
    """
    if not (1.0 <= p < min(model.alpha1, model.alpha2)):
        raise ArgumentError(f"p must lie in [1, min(alpha1, alpha2)), got {p}")
    stream = as_stream(rng)
    rows, eta = [], {}
    for i, eps in enumerate(eps_list):
        h0 = choose_step(eps, schedule, kappa_cfl)
        n = int(math.ceil(T / h0 - 1e-9))
        n += n % 2
        h = T / n
        eta[float(eps)] = schedule.eta(eps)
        sup_y = np.abs(np.broadcast_to(np.asarray(y0, float), (reps, model.d2))).max(axis=1) ** p
        for k, t, X, Y, _ in coupled_steps(model, schedule, eps, x0, y0, T, h, stream.child(i), reps):
            sup_y = np.maximum(sup_y, np.linalg.norm(Y, axis=1) ** p)
            if k + 1 in (n // 2, n):
                xs = np.linalg.norm(X, axis=1) ** p
                ys = np.linalg.norm(Y, axis=1) ** p
                rows.append(
                    {
                        "eps": float(eps),
                        "t": (k + 1) * h,
                        "x_moment": median_of_means(xs, mom_groups),
                        "x_spread": mom_spread(xs, mom_groups),
                        "y_moment": median_of_means(ys, mom_groups),
                        "y_spread": mom_spread(ys, mom_groups),
                        "sup_y": median_of_means(sup_y, mom_groups),
                        "sup_y_spread": mom_spread(sup_y, mom_groups),
                    }
                )
    return MomentTable(p=float(p), rows=rows, eta=eta)


# ---------------------------------------------------------------------------
# Tabulation of invariant means (used for the sine benchmark centering)


def tabulate_invariant_mean(
    model: ModelSpec,
    g,
    x_nodes,
    per_chain=4000,
    chains=40,
    thin=10,
    h=DEFAULT_H,
    burn_in=None,
    rng=0,
    antithetic=True,
):
    """Invariant means of a scalar observable at many anchors in one vectorised run.

    Returns ``(means, ses)`` over ``x_nodes`` with batch-means errors (one
    batch per chain, or per antithetic pair).
    """
    stream = as_stream(rng)
    nodes = np.asarray(x_nodes, dtype=float).reshape(-1, model.d1)
    m = nodes.shape[0]
    if burn_in is None:
        rates = [estimate_rate(model, xk, h=h, rng=stream.child(7)) for xk in nodes[:: max(1, m // 5)]]
        burn_in = default_burn_in(min(rates))
    burn_steps = int(math.ceil(burn_in / h - 1e-9))
    total = burn_steps + per_chain * thin
    width = chains // 2 if antithetic else chains
    xb = np.repeat(nodes, chains, axis=0)
    Y = np.zeros((m * chains, model.d2))
    acc = np.zeros((m, chains))
    from .integrator import NoiseBlocks, _guard

    noise = NoiseBlocks(stream.child(2), model.alpha2, model.d2, h, m * width, total)
    for k, dL in enumerate(noise):
        if antithetic:
            dL = np.stack([dL, -dL], axis=1).reshape(m * chains, model.d2)
        Y += h * model.f(xb, Y) + dL
        _guard(Y, k, "frozen state")
        step = k + 1 - burn_steps
        if step > 0 and step % thin == 0:
            acc += np.asarray(g(Y), dtype=float).reshape(m, chains)
    chain_means = acc / per_chain
    if antithetic:
        chain_means = chain_means.reshape(m, width, 2).mean(axis=2)
    units = chain_means.shape[1]
    return chain_means.mean(axis=1), chain_means.std(axis=1, ddof=1) / math.sqrt(units)


class CenteringTable:
    """Cubic-spline interpolant of tabulated invariant means, clamped outside the nodes."""

    def __init__(self, nodes, values, ses):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.ses = np.asarray(ses, dtype=float)
        self._spline = CubicSpline(self.nodes, self.values)
        self._deriv = self._spline.derivative()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self._spline(np.clip(x, self.nodes[0], self.nodes[-1]))

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.nodes[0]) & (x <= self.nodes[-1])
        return np.where(inside, self._deriv(np.clip(x, self.nodes[0], self.nodes[-1])), 0.0)

    def se(self, x):
        return float(np.interp(x, self.nodes, self.ses))


@functools.lru_cache(maxsize=16)
def tabulate_sine_centering(a, kappa, alpha2, seed=0, x_max=4.0, n_nodes=25, per_chain=12000, chains=200, thin=5):
    """Ergodic tabulation of ``S(x) = mu^x(sin)`` for the sine benchmark's fast drift."""
    frozen = ModelSpec(
        name="sine-frozen",
        d1=1,
        d2=1,
        b=lambda t, x, y: np.zeros_like(x),
        H=lambda t, x, y: np.zeros_like(x),
        f=lambda x, y: -kappa * (y - a * np.tanh(x)),
        c=lambda x, y: np.zeros_like(y),
        alpha1=alpha2,
        alpha2=alpha2,
    )
    nodes = np.linspace(-x_max, x_max, n_nodes)
    means, ses = tabulate_invariant_mean(
        frozen, np.sin, nodes, per_chain=per_chain, chains=chains, thin=thin, rng=seed,
        burn_in=math.log(1e3) / kappa,
    )
    return CenteringTable(nodes, means, ses)
