"""Robust aggregation and rate regression shared by the ergodic and experiment layers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, ParameterError


def median_of_means(samples, groups):
    """Median of the per-group means, grouping consecutive samples."""
    samples = np.asarray(samples, dtype=float).ravel()
    groups = int(groups)
    if groups < 1:
        raise ParameterError("groups must be at least 1")
    if samples.size == 0 or samples.size % groups:
        raise ArgumentError(f"{samples.size} samples cannot be split into {groups} equal groups")
    return float(np.median(samples.reshape(groups, -1).mean(axis=1)))


def mom_spread(samples, groups):
    """Spread of the group means over sqrt(groups); a standard-error proxy for the MoM estimate."""
    groups = int(groups)
    if groups < 2:
        return 0.0
    means = np.asarray(samples, dtype=float).reshape(groups, -1).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(groups))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    ci: tuple
    n_points: int


def _ols(logx, logy):
    A = np.vstack([logx, np.ones_like(logx)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, logy, rcond=None)
    resid = logy - (slope * logx + intercept)
    ss = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_rate(errors, eps_grid, resample: Optional[Callable] = None, n_boot=400, rng=0, level=0.95) -> RateFit:
    """Least-squares slope of log error against log eps with a bootstrap interval.

    ``resample(gen)`` returns an error vector recomputed from resampled
    replicates; without it the residuals of the fit are resampled.
    """
    errors = np.asarray(errors, dtype=float).ravel()
    eps = np.asarray(eps_grid, dtype=float).ravel()
    if errors.size != eps.size:
        raise ArgumentError("errors and eps_grid must have the same length")
    if errors.size < 3:
        raise ArgumentError("a rate fit needs at least 3 grid points")
    if np.any(~(errors > 0)):
        raise ArgumentError("errors must be positive (identical coupled paths give zero error)")
    if np.any(~(eps > 0)):
        raise ArgumentError("eps values must be positive")
    lx, ly = np.log(eps), np.log(errors)
    slope, intercept, r2 = _ols(lx, ly)
    gen = np.random.default_rng(rng)
    boots = []
    for _ in range(int(n_boot)):
        if resample is not None:
            e = np.asarray(resample(gen), dtype=float)
            if np.any(~(e > 0)):
                continue
            boots.append(_ols(lx, np.log(e))[0])
        else:
            resid = ly - (slope * lx + intercept)
            boots.append(_ols(lx, slope * lx + intercept + gen.choice(resid, resid.size))[0])
    if boots:
        q = (1.0 - level) / 2.0
        ci = (float(np.quantile(boots, q)), float(np.quantile(boots, 1.0 - q)))
    else:
        ci = (slope, slope)
    return RateFit(slope, intercept, r2, ci, int(errors.size))
