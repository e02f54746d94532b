"""Natural-parameter exponential families with exact estimators.

Four concrete families, all with sufficient statistic T(x) = x and
coordinate-wise log-partition, so products over coordinates come for free:

==========================  ===============  ==================  =====================
family                      natural domain   mean map            mean domain (open)
==========================  ===============  ==================  =====================
gaussian-mean-known-cov     all reals        theta               all reals
poisson                     all reals        exp(theta)          (0, inf)
bernoulli                   all reals        sigmoid(theta)      (0, 1)
exponential                 theta < 0        -1/theta            (0, inf)
==========================  ===============  ==================  =====================

Maximum likelihood is the mean of sufficient statistics pushed through the
inverse mean map; the closed forms above are exact, and a safeguarded
Newton solver is kept alongside as the general numeric route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundaryError, DegenerateSelectionError, InputValidationError
from .numerics import as_generator, as_vector

GAUSSIAN = "gaussian-mean-known-cov"
POISSON = "poisson"
BERNOULLI = "bernoulli"
EXPONENTIAL = "exponential"
FAMILIES = (GAUSSIAN, POISSON, BERNOULLI, EXPONENTIAL)

_ALIASES = {"gaussian": GAUSSIAN, "normal": GAUSSIAN}

WEIGHT_FLOOR_PER_POINT = 1e-6


@dataclass(frozen=True)
class ExpFamilyModel:
    """A family tag plus data dimension; all state needed to sample and fit."""

    family: str
    dim: int

    def __post_init__(self):
        family = _ALIASES.get(self.family, self.family)
        if family not in FAMILIES:
            raise InputValidationError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        object.__setattr__(self, "family", family)
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise InputValidationError("dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))


@dataclass(frozen=True, eq=False)
class Parameter:
    """A natural parameter bound to its model."""

    theta: np.ndarray
    model: ExpFamilyModel

    def __post_init__(self):
        theta = as_vector(self.theta, dim=self.model.dim, name="theta")
        _check_natural_domain(self.model.family, theta)
        object.__setattr__(self, "theta", theta)


def _check_natural_domain(family: str, theta: np.ndarray) -> None:
    if family == EXPONENTIAL and not np.all(theta < 0.0):
        raise InputValidationError("exponential natural parameters must be negative")


def _check_support(family: str, points: np.ndarray) -> None:
    if family == POISSON:
        if np.any(points < 0.0) or np.any(points != np.floor(points)):
            raise InputValidationError("poisson data must be nonnegative integers")
    elif family == BERNOULLI:
        if not np.all((points == 0.0) | (points == 1.0)):
            raise InputValidationError("bernoulli data must be 0/1 valued")
    elif family == EXPONENTIAL:
        if np.any(points < 0.0):
            raise InputValidationError("exponential data must be nonnegative")


def _check_mean_interior(family: str, tbar: np.ndarray) -> None:
    if not np.all(np.isfinite(tbar)):
        raise BoundaryError("mean statistic is not finite")
    if family == POISSON and not np.all(tbar > 0.0):
        raise BoundaryError("poisson mean statistic must be strictly positive")
    if family == BERNOULLI and not (np.all(tbar > 0.0) and np.all(tbar < 1.0)):
        raise BoundaryError("bernoulli mean statistic must lie strictly inside (0, 1)")
    if family == EXPONENTIAL and not np.all(tbar > 0.0):
        raise BoundaryError("exponential mean statistic must be strictly positive")


def _mean_from_natural(family: str, theta: np.ndarray) -> np.ndarray:
    if family == GAUSSIAN:
        return theta.copy()
    if family == POISSON:
        return np.exp(theta)
    if family == BERNOULLI:
        return 1.0 / (1.0 + np.exp(-theta))
    return -1.0 / theta


def _natural_from_mean(family: str, tbar: np.ndarray) -> np.ndarray:
    if family == GAUSSIAN:
        return tbar.copy()
    if family == POISSON:
        return np.log(tbar)
    if family == BERNOULLI:
        return np.log(tbar) - np.log1p(-tbar)
    return -1.0 / tbar


def _mean_slope(family: str, theta: np.ndarray) -> np.ndarray:
    """Derivative of the mean map per coordinate (the family variance)."""
    if family == GAUSSIAN:
        return np.ones_like(theta)
    if family == POISSON:
        return np.exp(theta)
    if family == BERNOULLI:
        p = 1.0 / (1.0 + np.exp(-theta))
        return p * (1.0 - p)
    return 1.0 / (theta * theta)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def as_dataset(model: ExpFamilyModel, points, name: str = "points") -> np.ndarray:
    """Validate a data batch as an (n, dim) float64 array on the family support."""
    data = np.asarray(points, dtype=float)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise InputValidationError(
            f"{name} must have shape (n, {model.dim}), got {np.asarray(points).shape}"
        )
    if data.shape[0] < 1:
        raise InputValidationError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(data)):
        raise InputValidationError(f"{name} must be finite")
    _check_support(model.family, data)
    return data


def sufficient_stat(model: ExpFamilyModel, x) -> np.ndarray:
    """T(x) for one point; identity for every family here, after support checks."""
    v = as_vector(x, dim=model.dim, name="x")
    _check_support(model.family, v)
    return v.copy()


def sufficient_stats(model: ExpFamilyModel, points) -> np.ndarray:
    """T applied row-wise to a batch."""
    return as_dataset(model, points).copy()


def mean_map(model: ExpFamilyModel, theta: Parameter) -> np.ndarray:
    """E[T(x)] under the parameter (the gradient of the log-partition)."""
    if theta.model != model:
        raise InputValidationError("parameter belongs to a different model")
    return _mean_from_natural(model.family, theta.theta)


def inverse_mean_map(model: ExpFamilyModel, tbar) -> Parameter:
    """Natural parameter whose mean statistic equals ``tbar`` (closed form)."""
    t = as_vector(tbar, dim=model.dim, name="tbar")
    _check_mean_interior(model.family, t)
    return Parameter(_natural_from_mean(model.family, t), model)


def numeric_inverse_mean_map(
    model: ExpFamilyModel, tbar, tol: float = 1e-12, max_iter: int = 100
) -> Parameter:
    """Invert the mean map by safeguarded Newton iteration.

    Monotone coordinate-wise solve with a geometrically expanded bisection
    bracket, the route a family without a closed form would take. Kept as
    an independent cross-check of :func:`inverse_mean_map`.
    """
    t = as_vector(tbar, dim=model.dim, name="tbar")
    _check_mean_interior(model.family, t)
    family = model.family
    out = np.empty_like(t)
    for j, target in enumerate(t):
        lo, hi = _initial_bracket(family, target)
        theta = 0.5 * (lo + hi)
        for _ in range(max_iter):
            arr = np.array([theta])
            resid = float(_mean_from_natural(family, arr)[0]) - target
            if abs(resid) <= tol * max(1.0, abs(target)):
                break
            if resid > 0.0:
                hi = theta
            else:
                lo = theta
            slope = float(_mean_slope(family, arr)[0])
            step = theta - resid / slope if slope > 0.0 else None
            if step is None or not (lo < step < hi):
                step = 0.5 * (lo + hi)
            theta = step
        out[j] = theta
    return Parameter(out, model)


def _initial_bracket(family: str, target: float) -> tuple[float, float]:
    """A (lo, hi) natural-parameter bracket with mean(lo) < target < mean(hi)."""
    if family == GAUSSIAN:
        return target - 1.0, target + 1.0
    if family == EXPONENTIAL:
        lo, hi = -2.0 / target, -0.5 / target
        while float(_mean_from_natural(family, np.array([lo]))[0]) >= target:
            lo *= 2.0
        while float(_mean_from_natural(family, np.array([hi]))[0]) <= target:
            hi *= 0.5
        return lo, hi
    lo, hi = -1.0, 1.0
    while float(_mean_from_natural(family, np.array([lo]))[0]) >= target:
        lo *= 2.0
    while float(_mean_from_natural(family, np.array([hi]))[0]) <= target:
        hi *= 2.0
    return lo, hi


def estimate(model: ExpFamilyModel, points) -> Parameter:
    """Maximum-likelihood fit: inverse mean map of the average statistic."""
    data = as_dataset(model, points)
    tbar = data.sum(axis=0) / data.shape[0]
    _check_mean_interior(model.family, tbar)
    return Parameter(_natural_from_mean(model.family, tbar), model)


def weighted_estimate(model: ExpFamilyModel, points, weights) -> Parameter:
    """Weighted maximum likelihood with weights in [0, 1].

    Rejects weight vectors whose sum falls below 1e-6 per point (a filter
    that keeps nothing defines no estimate). Weights are rescaled by their
    maximum before averaging so that constant weights cancel exactly.
    """
    data = as_dataset(model, points)
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.shape[0],):
        raise InputValidationError(
            f"weights must have shape ({data.shape[0]},), got {w.shape}"
        )
    if not np.all(np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
        raise InputValidationError("weights must be finite and lie in [0, 1]")
    total = float(w.sum())
    floor = WEIGHT_FLOOR_PER_POINT * data.shape[0]
    if total <= floor:
        raise DegenerateSelectionError(
            f"weight sum {total:.3e} is at or below the floor {floor:.3e}"
        )
    scaled = w / w.max()
    tbar = (data * scaled[:, None]).sum(axis=0) / scaled.sum()
    _check_mean_interior(model.family, tbar)
    return Parameter(_natural_from_mean(model.family, tbar), model)


def sample(model: ExpFamilyModel, theta: Parameter, n: int, rng) -> np.ndarray:
    """Draw n i.i.d. points from the parameterized distribution, shape (n, dim)."""
    if theta.model != model:
        raise InputValidationError("parameter belongs to a different model")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InputValidationError("n must be a positive integer")
    gen = as_generator(rng)
    family, d = model.family, model.dim
    if family == GAUSSIAN:
        return theta.theta + gen.standard_normal((int(n), d))
    if family == POISSON:
        return gen.poisson(lam=np.exp(theta.theta), size=(int(n), d)).astype(float)
    if family == BERNOULLI:
        p = 1.0 / (1.0 + np.exp(-theta.theta))
        return (gen.random((int(n), d)) < p).astype(float)
    return gen.exponential(scale=-1.0 / theta.theta, size=(int(n), d))
