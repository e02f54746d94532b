"""Error-dynamics simulators: abstract contraction updates and model workflows.

Two layers share one trajectory format. The abstract layer iterates
e_{t+1} = A(e_t) e_t + xi_t with martingale-difference noise whose
P-energy follows a schedule. The workflow layer re-fits an exponential
family on its own samples each generation, with or without a reweighting
filter in the loop, which is where estimation error actually comes from.

Monte-Carlo helpers fan one base RngState out into one independent stream
per trial and reduce in fixed trial order, so results do not depend on
how many workers ran the trials.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import expfam
from .contraction import ContractionMap, LyapunovMetric
from .errors import (
    CollapseGuardError,
    InputValidationError,
    SimulationOverflowError,
)
from .numerics import RngState, as_generator, as_vector

ZERO = "zero"
POWER_LAW = "power-law"
CONSTANT = "constant"

DIVERGENCE_CAP = 1e12
DEFAULT_DELTAS = (0.1, 0.2, 0.5)
WORKERS_ENV_VAR = "COLLAPSEGUARD_WORKERS"

_BLOCK = 256
_CHUNK = 2048


def worker_count() -> int:
    """Worker count from the environment (the only env knob this package reads)."""
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        value = int(raw)
    except ValueError as exc:
        raise InputValidationError(f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise InputValidationError(f"{WORKERS_ENV_VAR} must be >= 1")
    return value


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise energy sigma_t^2 and the metric shaping the draws.

    ``power-law`` decays as scale * (t+1)^(-beta) and satisfies the
    vanishing-noise assumption; ``constant`` does not and exists as a
    negative control; ``zero`` draws nothing at all.
    """

    kind: str
    beta: float = 1.0
    scale: float = 1.0
    metric: LyapunovMetric | None = None

    def __post_init__(self):
        if self.kind not in (ZERO, POWER_LAW, CONSTANT):
            raise InputValidationError(f"unknown noise schedule kind {self.kind!r}")
        if self.kind == POWER_LAW and self.beta <= 0.0:
            raise InputValidationError("power-law beta must be positive")
        if self.scale < 0.0:
            raise InputValidationError("scale must be nonnegative")

    @classmethod
    def zero(cls) -> "NoiseSchedule":
        return cls(ZERO, scale=0.0)

    @classmethod
    def power(cls, beta: float, scale: float = 1.0, metric: LyapunovMetric | None = None) -> "NoiseSchedule":
        return cls(POWER_LAW, beta=beta, scale=scale, metric=metric)

    @classmethod
    def constant(cls, scale: float, metric: LyapunovMetric | None = None) -> "NoiseSchedule":
        return cls(CONSTANT, scale=scale, metric=metric)

    @property
    def vanishes(self) -> bool:
        """Whether sigma_t^2 -> 0, the standing noise assumption."""
        return self.kind == ZERO or self.kind == POWER_LAW or self.scale == 0.0

    def sigma_sq(self, t: int) -> float:
        if t < 0:
            raise InputValidationError("t must be nonnegative")
        if self.kind == ZERO:
            return 0.0
        if self.kind == CONSTANT:
            return self.scale
        return self.scale * float(t + 1) ** -self.beta

    def sigma_sq_array(self, start: int, stop: int) -> np.ndarray:
        t = np.arange(start, stop, dtype=float)
        if self.kind == ZERO:
            return np.zeros(stop - start)
        if self.kind == CONSTANT:
            return np.full(stop - start, self.scale)
        return self.scale * (t + 1.0) ** -self.beta

    def transform(self, dim: int) -> np.ndarray | None:
        """C with C C' = P^{-1}, or None when the metric is (effectively) identity."""
        if self.metric is None:
            return None
        if self.metric.dim != dim:
            raise InputValidationError(
                f"noise metric dimension {self.metric.dim} does not match dim {dim}"
            )
        if self.metric.is_identity:
            return None
        return self.metric.inverse_factor


@dataclass(frozen=True)
class SampleSchedule:
    """Per-generation sample sizes n_t.

    ``constant`` keeps the base size; ``power`` grows as
    ceil(base * t^exponent) for t >= 1 (the base also seeds generation 0,
    which always fits real data).
    """

    kind: str
    base: int = 100
    exponent: float = 0.0

    def __post_init__(self):
        if self.kind not in (CONSTANT, "power"):
            raise InputValidationError(f"unknown sample schedule kind {self.kind!r}")
        if not isinstance(self.base, (int, np.integer)) or self.base < 1:
            raise InputValidationError("base sample size must be a positive integer")
        if self.exponent < 0.0:
            raise InputValidationError("exponent must be nonnegative")

    @classmethod
    def constant_size(cls, base: int) -> "SampleSchedule":
        return cls(CONSTANT, base=base)

    @classmethod
    def power(cls, base: int, exponent: float) -> "SampleSchedule":
        return cls("power", base=base, exponent=exponent)

    def size(self, t: int) -> int:
        if t < 0:
            raise InputValidationError("t must be nonnegative")
        if t == 0 or self.kind == CONSTANT:
            return int(self.base)
        return int(math.ceil(self.base * float(t) ** self.exponent))


# ---------------------------------------------------------------------------
# Trajectories and aggregation
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ErrorTrajectory:
    """One trial's error path: records (t, e_t, V_t, n_t) for t = 0..horizon.

    After a divergence (V above the cap) the state freezes, so the arrays
    always have horizon+1 rows; ``diverged_at`` is the first frozen step.
    """

    ts: np.ndarray
    errors: np.ndarray
    vs: np.ndarray
    ns: np.ndarray
    horizon: int
    trial_id: int = 0
    diverged_at: int | None = None

    def __post_init__(self):
        n = self.horizon + 1
        if not (
            self.ts.shape == (n,)
            and self.errors.shape[0] == n
            and self.vs.shape == (n,)
            and self.ns.shape == (n,)
        ):
            raise InputValidationError("trajectory arrays must all have horizon+1 rows")

    @property
    def dim(self) -> int:
        return self.errors.shape[1]

    def sq_norms(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.errors, self.errors)


@dataclass(eq=False)
class TrialStats:
    """Step-indexed aggregates over a trial population."""

    ts: np.ndarray
    mse: np.ndarray
    mean_v: np.ndarray
    exceedance: dict[float, np.ndarray]
    trials: int
    ns: np.ndarray

    def exceedance_at(self, delta: float) -> np.ndarray:
        key = float(delta)
        if key not in self.exceedance:
            raise InputValidationError(f"no exceedance recorded for delta={delta}")
        return self.exceedance[key]


def _validate_deltas(deltas) -> tuple[float, ...]:
    out = tuple(float(d) for d in deltas)
    if len(out) == 0:
        raise InputValidationError("deltas must be non-empty")
    for d in out:
        if not np.isfinite(d) or d < 0.0:
            raise InputValidationError("deltas must be finite and nonnegative")
    return out


def aggregate_exceedance(trajectories, deltas=DEFAULT_DELTAS) -> TrialStats:
    """Fold trajectories into per-step MSE, mean V, and exceedance fractions.

    Exceedance at delta is the fraction of trials with ||e_t|| > delta;
    diverged trials count as exceeding every threshold from their
    divergence step on. Mixed horizons are rejected.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise InputValidationError("need at least one trajectory")
    ds = _validate_deltas(deltas)
    horizon = trajectories[0].horizon
    dim = trajectories[0].dim
    for traj in trajectories:
        if traj.horizon != horizon or traj.dim != dim:
            raise InputValidationError("trajectories must share horizon and dimension")

    n = horizon + 1
    sum_sq = np.zeros(n)
    sum_v = np.zeros(n)
    counts = {d: np.zeros(n) for d in ds}
    for traj in trajectories:
        sq = traj.sq_norms()
        sum_sq += sq
        sum_v += traj.vs
        norms = np.sqrt(sq)
        if traj.diverged_at is None:
            div = np.zeros(n, dtype=bool)
        else:
            div = trajectories[0].ts >= traj.diverged_at
        for d in ds:
            counts[d] += (norms > d) | div
    trials = len(trajectories)
    return TrialStats(
        ts=trajectories[0].ts.copy(),
        mse=sum_sq / trials,
        mean_v=sum_v / trials,
        exceedance={d: counts[d] / trials for d in ds},
        trials=trials,
        ns=trajectories[0].ns.copy(),
    )


# ---------------------------------------------------------------------------
# Abstract dynamics
# ---------------------------------------------------------------------------


def sample_noise(schedule: NoiseSchedule, t: int, dim: int, rng) -> np.ndarray:
    """One noise draw xi_t with E[xi' P xi] = sigma_t^2 under the schedule's metric."""
    if dim < 1:
        raise InputValidationError("dim must be positive")
    sigma_sq = schedule.sigma_sq(t)
    if schedule.kind == ZERO or sigma_sq == 0.0:
        return np.zeros(dim)
    gen = as_generator(rng)
    z = gen.standard_normal(dim)
    c = schedule.transform(dim)
    scale = math.sqrt(sigma_sq / dim)
    if c is None:
        return scale * z
    return scale * (z[None, :] @ c.T)[0]


def simulate_error_dynamics(
    map_: ContractionMap,
    noise: NoiseSchedule,
    e0,
    horizon: int,
    rng,
    divergence_cap: float = DIVERGENCE_CAP,
    trial_id: int = 0,
) -> ErrorTrajectory:
    """Iterate e_{t+1} = A(e_t) e_t + xi_t for ``horizon`` steps.

    The trajectory freezes (and is marked diverged) once V exceeds the
    cap; a state that becomes non-finite raises SimulationOverflowError
    with the offending step.
    """
    if not isinstance(horizon, (int, np.integer)) or horizon < 0:
        raise InputValidationError("horizon must be a nonnegative integer")
    metric = map_.metric
    dim = metric.dim
    e = as_vector(e0, dim=dim, name="e0").copy()
    gen = as_generator(rng)
    c_transform = noise.transform(dim)
    zero_noise = noise.kind == ZERO

    errors = np.empty((horizon + 1, dim))
    vs = np.empty(horizon + 1)
    errors[0] = e
    vs[0] = metric.values(e[None, :])[0]
    diverged_at = None
    if vs[0] > divergence_cap:
        diverged_at = 0
        errors[:] = e
        vs[:] = vs[0]
    else:
        for t in range(horizon):
            e = map_.apply_batch(e[None, :])[0]
            if not zero_noise:
                sigma_sq = noise.sigma_sq(t)
                if sigma_sq > 0.0:
                    z = gen.standard_normal(dim)
                    scale = math.sqrt(sigma_sq / dim)
                    if c_transform is None:
                        e = e + scale * z
                    else:
                        e = e + scale * (z[None, :] @ c_transform.T)[0]
            if not np.all(np.isfinite(e)):
                raise SimulationOverflowError(t + 1)
            v = metric.values(e[None, :])[0]
            errors[t + 1] = e
            vs[t + 1] = v
            if v > divergence_cap:
                diverged_at = t + 1
                errors[t + 2 :] = e
                vs[t + 2 :] = v
                break

    return ErrorTrajectory(
        ts=np.arange(horizon + 1),
        errors=errors,
        vs=vs,
        ns=np.zeros(horizon + 1, dtype=np.int64),
        horizon=int(horizon),
        trial_id=trial_id,
        diverged_at=diverged_at,
    )


def _dynamics_block(args):
    """Simulate one contiguous block of trials, batched across trials."""
    (map_, noise, e0, horizon, rng, trial_lo, trial_hi, ds, cap, record) = args
    metric = map_.metric
    dim = metric.dim
    b = trial_hi - trial_lo
    gens = [rng.derive(i).generator() for i in range(trial_lo, trial_hi)]
    e_state = np.tile(e0, (b, 1))
    diverged = np.full(b, -1, dtype=np.int64)
    n = horizon + 1
    sum_sq = np.zeros(n)
    sum_v = np.zeros(n)
    exceed = np.zeros((len(ds), n))
    records = np.empty((b, n, dim)) if record else None

    zero_noise = noise.kind == ZERO
    c_transform = noise.transform(dim)

    v_all = metric.values(e_state)
    diverged[v_all > cap] = 0
    sq = np.einsum("ij,ij->i", e_state, e_state)
    sum_sq[0] = sq.sum()
    sum_v[0] = v_all.sum()
    norms = np.sqrt(sq)
    div_now = diverged == 0
    for j, d in enumerate(ds):
        exceed[j, 0] = ((norms > d) | div_now).sum()
    if record:
        records[:, 0] = e_state

    t = 0
    while t < horizon:
        span = min(_CHUNK, horizon - t)
        bufs = None
        scales = None
        if not zero_noise:
            bufs = np.empty((b, span, dim))
            for i, g in enumerate(gens):
                bufs[i] = g.standard_normal((span, dim))
            if c_transform is not None:
                bufs = bufs @ c_transform.T
            scales = np.sqrt(noise.sigma_sq_array(t, t + span) / dim)
        for k in range(span):
            step = t + k
            act = np.nonzero(diverged < 0)[0]
            if act.size:
                updated = map_.apply_batch(e_state[act])
                if not zero_noise and scales[k] > 0.0:
                    updated = updated + scales[k] * bufs[act, k, :]
                if not np.all(np.isfinite(updated)):
                    raise SimulationOverflowError(step + 1)
                e_state[act] = updated
                v_act = metric.values(updated)
                newly = act[v_act > cap]
                if newly.size:
                    diverged[newly] = step + 1
            sq = np.einsum("ij,ij->i", e_state, e_state)
            v_all = metric.values(e_state)
            sum_sq[step + 1] = sq.sum()
            sum_v[step + 1] = v_all.sum()
            norms = np.sqrt(sq)
            div_now = (diverged >= 0) & (diverged <= step + 1)
            for j, d in enumerate(ds):
                exceed[j, step + 1] = ((norms > d) | div_now).sum()
            if record:
                records[:, step + 1] = e_state
        t += span
    return sum_sq, sum_v, exceed, diverged, records


def run_dynamics_trials(
    map_: ContractionMap,
    noise: NoiseSchedule,
    e0,
    horizon: int,
    trials: int,
    rng: RngState,
    deltas=DEFAULT_DELTAS,
    workers: int | None = None,
    divergence_cap: float = DIVERGENCE_CAP,
    record_trajectories: bool = False,
):
    """Monte-Carlo over independent trials of the abstract dynamics.

    Trial i draws from ``rng.derive(i)``, so any partition of trials over
    workers reproduces the serial result bit for bit (reduction happens in
    fixed 256-trial blocks). Returns TrialStats, or (TrialStats, list of
    ErrorTrajectory) when ``record_trajectories`` is set.
    """
    if not isinstance(rng, RngState):
        raise InputValidationError("rng must be an RngState (per-trial streams are derived)")
    if trials < 1:
        raise InputValidationError("trials must be positive")
    ds = _validate_deltas(deltas)
    e0 = as_vector(e0, dim=map_.metric.dim, name="e0")
    if workers is None:
        workers = worker_count()

    blocks = [
        (lo, min(lo + _BLOCK, trials))
        for lo in range(0, trials, _BLOCK)
    ]
    jobs = [
        (map_, noise, e0, int(horizon), rng, lo, hi, ds, divergence_cap, record_trajectories)
        for lo, hi in blocks
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_dynamics_block, jobs))
    else:
        results = [_dynamics_block(job) for job in jobs]

    n = int(horizon) + 1
    sum_sq = np.zeros(n)
    sum_v = np.zeros(n)
    exceed = np.zeros((len(ds), n))
    trajectories: list[ErrorTrajectory] = []
    for (lo, hi), (bsq, bv, bex, bdiv, brec) in zip(blocks, results):
        sum_sq += bsq
        sum_v += bv
        exceed += bex
        if record_trajectories:
            for i in range(hi - lo):
                errs = brec[i]
                diverged_at = int(bdiv[i]) if bdiv[i] >= 0 else None
                trajectories.append(
                    ErrorTrajectory(
                        ts=np.arange(n),
                        errors=errs.copy(),
                        vs=map_.metric.values(errs),
                        ns=np.zeros(n, dtype=np.int64),
                        horizon=int(horizon),
                        trial_id=lo + i,
                        diverged_at=diverged_at,
                    )
                )

    stats = TrialStats(
        ts=np.arange(n),
        mse=sum_sq / trials,
        mean_v=sum_v / trials,
        exceedance={d: exceed[j] / trials for j, d in enumerate(ds)},
        trials=trials,
        ns=np.zeros(n, dtype=np.int64),
    )
    if record_trajectories:
        return stats, trajectories
    return stats


# ---------------------------------------------------------------------------
# Model-fitting workflows
# ---------------------------------------------------------------------------


def _fit_generation(model, points, weights, t):
    try:
        if weights is None:
            return expfam.estimate(model, points)
        return expfam.weighted_estimate(model, points, weights)
    except CollapseGuardError as exc:
        raise type(exc)(f"generation {t}: {exc}") from exc


def run_workflow(
    model: expfam.ExpFamilyModel,
    theta_star: expfam.Parameter,
    schedule: SampleSchedule,
    horizon: int,
    rng,
    divergence_cap: float = DIVERGENCE_CAP,
    trial_id: int = 0,
) -> ErrorTrajectory:
    """The unfiltered self-consuming loop.

    Generation 0 fits schedule.size(0) real draws from theta_star; each
    later generation samples schedule.size(t) points from its predecessor's
    fit and re-estimates. Records e_t = theta_hat_t - theta_star with the
    identity-metric V.
    """
    return _run_workflow_impl(
        model, theta_star, schedule, horizon, rng, None, None, divergence_cap, trial_id
    )


def run_workflow_filtered(
    model: expfam.ExpFamilyModel,
    theta_star: expfam.Parameter,
    schedule: SampleSchedule,
    horizon: int,
    filter_handle,
    candidates_per_round: int | None,
    rng,
    divergence_cap: float = DIVERGENCE_CAP,
    trial_id: int = 0,
) -> ErrorTrajectory:
    """The filtered loop: candidates are reweighted before re-estimation.

    ``filter_handle`` is anything with a ``weights(points) -> array`` method
    (see the filtering module). ``candidates_per_round=None`` follows the
    sample schedule each round; an integer fixes the candidate count for
    every round past the initial real-data fit. A filter emitting all-ones
    weights reproduces the unfiltered workflow exactly on the same stream
    and counts.
    """
    if filter_handle is None or not hasattr(filter_handle, "weights"):
        raise InputValidationError("filter_handle must expose a weights(points) method")
    if candidates_per_round is not None and candidates_per_round < 1:
        raise InputValidationError("candidates_per_round must be positive when given")
    return _run_workflow_impl(
        model,
        theta_star,
        schedule,
        horizon,
        rng,
        filter_handle,
        candidates_per_round,
        divergence_cap,
        trial_id,
    )


def _run_workflow_impl(
    model,
    theta_star,
    schedule,
    horizon,
    rng,
    filter_handle,
    candidates_per_round,
    divergence_cap,
    trial_id,
):
    if not isinstance(horizon, (int, np.integer)) or horizon < 0:
        raise InputValidationError("horizon must be a nonnegative integer")
    if theta_star.model != model:
        raise InputValidationError("theta_star belongs to a different model")
    gen = as_generator(rng)
    dim = model.dim
    n = horizon + 1
    errors = np.empty((n, dim))
    ns = np.zeros(n, dtype=np.int64)
    current = theta_star
    diverged_at = None
    for t in range(n):
        if filter_handle is None or t == 0:
            size = schedule.size(t)
        else:
            size = candidates_per_round if candidates_per_round is not None else schedule.size(t)
        points = expfam.sample(model, current, size, gen)
        if filter_handle is None or t == 0:
            fitted = _fit_generation(model, points, None, t)
        else:
            w = np.asarray(filter_handle.weights(points), dtype=float)
            if w.shape != (size,):
                raise InputValidationError(
                    f"generation {t}: filter returned weights of shape {w.shape}, expected ({size},)"
                )
            fitted = _fit_generation(model, points, w, t)
        errors[t] = fitted.theta - theta_star.theta
        ns[t] = size
        if not np.all(np.isfinite(errors[t])):
            raise SimulationOverflowError(t)
        if float(errors[t] @ errors[t]) > divergence_cap:
            diverged_at = t
            errors[t + 1 :] = errors[t]
            ns[t + 1 :] = 0
            break
        current = fitted

    vs = np.einsum("ij,ij->i", errors, errors)
    return ErrorTrajectory(
        ts=np.arange(n),
        errors=errors,
        vs=vs,
        ns=ns,
        horizon=int(horizon),
        trial_id=trial_id,
        diverged_at=diverged_at,
    )


def _workflow_range(args):
    (model, theta_star, schedule, horizon, rng, lo, hi, filter_handle, candidates, cap) = args
    out = []
    for i in range(lo, hi):
        if filter_handle is None:
            traj = run_workflow(
                model, theta_star, schedule, horizon, rng.derive(i), cap, trial_id=i
            )
        else:
            traj = run_workflow_filtered(
                model,
                theta_star,
                schedule,
                horizon,
                filter_handle,
                candidates,
                rng.derive(i),
                cap,
                trial_id=i,
            )
        out.append(traj)
    return out


def run_workflow_trials(
    model: expfam.ExpFamilyModel,
    theta_star: expfam.Parameter,
    schedule: SampleSchedule,
    horizon: int,
    trials: int,
    rng: RngState,
    deltas=DEFAULT_DELTAS,
    filter_handle=None,
    candidates_per_round: int | None = None,
    workers: int | None = None,
    divergence_cap: float = DIVERGENCE_CAP,
    record_trajectories: bool = False,
):
    """Monte-Carlo over workflow trials; trial i runs on ``rng.derive(i)``."""
    if not isinstance(rng, RngState):
        raise InputValidationError("rng must be an RngState (per-trial streams are derived)")
    if trials < 1:
        raise InputValidationError("trials must be positive")
    if workers is None:
        workers = worker_count()

    blocks = [(lo, min(lo + _BLOCK, trials)) for lo in range(0, trials, _BLOCK)]
    jobs = [
        (model, theta_star, schedule, int(horizon), rng, lo, hi,
         filter_handle, candidates_per_round, divergence_cap)
        for lo, hi in blocks
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_workflow_range, jobs))
    else:
        chunks = [_workflow_range(job) for job in jobs]
    trajectories = [traj for chunk in chunks for traj in chunk]
    stats = aggregate_exceedance(trajectories, deltas)
    if record_trajectories:
        return stats, trajectories
    return stats
