"""Configuration-driven experiment harness.

Turns a JSON config into one of six scenario pipelines (abstract error
dynamics, unfiltered or filtered self-consuming workflows, deterministic
rate verification, estimator concentration curves, filter training),
writes diff-friendly CSV plus a JSON summary, and exposes the named
acceptance checks behind the CLI's --check flag. All artifacts are
deterministic for a fixed (config, seed) pair and written atomically.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expfam
from .contraction import (
    ContractionFn,
    ContractionMap,
    LyapunovMetric,
    RegulatorFn,
    constant_bounds,
    fit_decay_rate,
    limsup_bound,
    measure_concentration,
    power_law_bounds,
    recurrence_simulate,
)
from .dynamics import (
    NoiseSchedule,
    SampleSchedule,
    run_dynamics_trials,
    run_workflow_trials,
)
from .errors import CheckFailureError, InputValidationError
from .filtering import (
    FilterHandle,
    LabeledDataset,
    TrainConfig,
    anchors_from_dataset,
    fit_pca,
    forward_batch,
    load_filter_checkpoint,
    merge_datasets,
    save_filter_checkpoint,
    simulate_drift_training_data,
    total_loss,
    train_filter,
)
from .numerics import RngState

SCENARIOS = (
    "dynamics",
    "workflow",
    "workflow-filtered",
    "rates",
    "concentration",
    "train-filter",
)

FIXED_DELTAS = (0.1, 0.2, 0.5)

CSV_HEADER = "scenario,t,n_t,mse,mean_V,exceed_0.1,exceed_0.2,exceed_0.5,trials,config_hash"
COMPARE_HEADER = "t,baseline_mse,treatment_mse,ratio"
TRAINING_LOG_HEADER = "epoch,total,class_part,contract_part,ess_part"

GAUSSIAN_TAIL_3 = math.erfc(3.0 / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Config parsing helpers
# ---------------------------------------------------------------------------


def _section(raw, name: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise InputValidationError(f"config section {name!r} must be a mapping")
    return raw


def _reject_unknown(raw: dict, allowed, name: str) -> None:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise InputValidationError(f"unknown {name} field(s): {', '.join(sorted(unknown))}")


def _num(raw, name: str) -> float:
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise InputValidationError(f"{name} must be a number")
    return float(raw)


def _int(raw, name: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise InputValidationError(f"{name} must be an integer")
    return int(raw)


def _str(raw, name: str) -> str:
    if not isinstance(raw, str):
        raise InputValidationError(f"{name} must be a string")
    return raw


def _float_tuple(raw, name: str) -> tuple[float, ...]:
    if not isinstance(raw, (list, tuple)):
        raise InputValidationError(f"{name} must be a sequence of numbers")
    return tuple(_num(v, f"{name}[{i}]") for i, v in enumerate(raw))


def _int_tuple(raw, name: str) -> tuple[int, ...]:
    if not isinstance(raw, (list, tuple)):
        raise InputValidationError(f"{name} must be a sequence of integers")
    return tuple(_int(v, f"{name}[{i}]") for i, v in enumerate(raw))


# ---------------------------------------------------------------------------
# Config sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    family: str = expfam.GAUSSIAN
    dim: int = 1
    theta_star: tuple[float, ...] | None = None

    def __post_init__(self):
        expfam.ExpFamilyModel(self.family, self.dim)
        if self.theta_star is not None and len(self.theta_star) != self.dim:
            raise InputValidationError("model.theta_star length must equal model.dim")

    @classmethod
    def from_dict(cls, raw) -> "ModelSpec":
        raw = _section(raw, "model")
        _reject_unknown(raw, ("family", "dim", "theta_star"), "model")
        out = cls(
            family=_str(raw.get("family", expfam.GAUSSIAN), "model.family"),
            dim=_int(raw.get("dim", 1), "model.dim"),
            theta_star=(
                _float_tuple(raw["theta_star"], "model.theta_star")
                if raw.get("theta_star") is not None
                else None
            ),
        )
        return out

    def build(self) -> tuple[expfam.ExpFamilyModel, expfam.Parameter]:
        model = expfam.ExpFamilyModel(self.family, self.dim)
        theta = (
            np.asarray(self.theta_star, dtype=float)
            if self.theta_star is not None
            else np.ones(self.dim)
        )
        return model, expfam.Parameter(theta, model)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "dim": self.dim,
            "theta_star": list(self.theta_star) if self.theta_star is not None else None,
        }


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    base: int = 100
    exponent: float = 0.0

    def __post_init__(self):
        self.build()

    @classmethod
    def from_dict(cls, raw) -> "ScheduleSpec":
        raw = _section(raw, "schedule")
        _reject_unknown(raw, ("kind", "base", "exponent"), "schedule")
        return cls(
            kind=_str(raw.get("kind", "constant"), "schedule.kind"),
            base=_int(raw.get("base", 100), "schedule.base"),
            exponent=_num(raw.get("exponent", 0.0), "schedule.exponent"),
        )

    def build(self) -> SampleSchedule:
        return SampleSchedule(self.kind, base=self.base, exponent=self.exponent)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base": self.base, "exponent": self.exponent}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "power-law"
    beta: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        self.build()

    @classmethod
    def from_dict(cls, raw) -> "NoiseSpec":
        raw = _section(raw, "noise")
        _reject_unknown(raw, ("kind", "beta", "scale"), "noise")
        return cls(
            kind=_str(raw.get("kind", "power-law"), "noise.kind"),
            beta=_num(raw.get("beta", 1.0), "noise.beta"),
            scale=_num(raw.get("scale", 1.0), "noise.scale"),
        )

    def build(self, metric: LyapunovMetric | None = None) -> NoiseSchedule:
        return NoiseSchedule(self.kind, beta=self.beta, scale=self.scale, metric=metric)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "scale": self.scale}


@dataclass(frozen=True)
class ContractionSpec:
    kind: str = "example-sqrt"
    alpha: float = 1.0
    level: float = 0.5
    c_max: float = 0.9

    def __post_init__(self):
        self.build()

    @classmethod
    def from_dict(cls, raw) -> "ContractionSpec":
        raw = _section(raw, "contraction")
        _reject_unknown(raw, ("kind", "alpha", "level", "c_max"), "contraction")
        return cls(
            kind=_str(raw.get("kind", "example-sqrt"), "contraction.kind"),
            alpha=_num(raw.get("alpha", 1.0), "contraction.alpha"),
            level=_num(raw.get("level", 0.5), "contraction.level"),
            c_max=_num(raw.get("c_max", 0.9), "contraction.c_max"),
        )

    def build(self) -> ContractionFn:
        if self.kind == "example-sqrt":
            return ContractionFn.example_sqrt()
        if self.kind == "quadratic":
            return ContractionFn.quadratic(self.alpha, c_max=self.c_max)
        if self.kind == "constant":
            return ContractionFn.constant(self.level)
        raise InputValidationError(f"unknown contraction.kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "level": self.level, "c_max": self.c_max}


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "none"
    gamma: float = 0.5
    checkpoint: str | None = None
    candidates_per_round: int = 1000

    def __post_init__(self):
        if self.kind not in ("none", "all-ones", "oracle-pullback", "mlp"):
            raise InputValidationError(f"unknown filter.kind {self.kind!r}")
        if self.kind == "oracle-pullback" and not 0.0 < self.gamma <= 1.0:
            raise InputValidationError("filter.gamma must lie in (0, 1]")
        if self.kind == "mlp" and not self.checkpoint:
            raise InputValidationError("filter.kind 'mlp' requires filter.checkpoint")
        if self.candidates_per_round < 2:
            raise InputValidationError("filter.candidates_per_round must be at least 2")

    @classmethod
    def from_dict(cls, raw) -> "FilterSpec":
        raw = _section(raw, "filter")
        _reject_unknown(raw, ("kind", "gamma", "checkpoint", "candidates_per_round"), "filter")
        checkpoint = raw.get("checkpoint")
        return cls(
            kind=_str(raw.get("kind", "none"), "filter.kind"),
            gamma=_num(raw.get("gamma", 0.5), "filter.gamma"),
            checkpoint=_str(checkpoint, "filter.checkpoint") if checkpoint is not None else None,
            candidates_per_round=_int(
                raw.get("candidates_per_round", 1000), "filter.candidates_per_round"
            ),
        )

    def build(self, theta_star: expfam.Parameter) -> FilterHandle | None:
        if self.kind == "none":
            return None
        if self.kind == "all-ones":
            return FilterHandle.all_ones()
        if self.kind == "oracle-pullback":
            # anchored at the true parameter: a diagnostic, not a deployable filter
            return FilterHandle.oracle_pullback(theta_star, self.gamma)
        params, pca, _ = load_filter_checkpoint(self.checkpoint)
        return FilterHandle.mlp(params, pca)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "checkpoint": self.checkpoint,
            "candidates_per_round": self.candidates_per_round,
        }


@dataclass(frozen=True)
class RatesSpec:
    kind: str = "power-law"
    p: float = 2.0
    c1: float = 1.0
    c2: float | None = None
    x0: float = 1.0
    steps: int = 100000
    noise_kind: str = "power-law"
    noise_beta: float = 1.0
    noise_scale: float = 1.0
    tail_fraction: float = 0.9

    def __post_init__(self):
        if self.kind not in ("power-law", "example-sqrt"):
            raise InputValidationError(f"unknown rates.kind {self.kind!r}")
        if self.noise_kind not in ("power-law", "constant", "zero"):
            raise InputValidationError(f"unknown rates.noise_kind {self.noise_kind!r}")
        if self.steps < 2:
            raise InputValidationError("rates.steps must be at least 2")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise InputValidationError("rates.tail_fraction must lie in (0, 1]")
        self.build_regulator()

    @classmethod
    def from_dict(cls, raw) -> "RatesSpec":
        raw = _section(raw, "rates")
        allowed = (
            "kind", "p", "c1", "c2", "x0", "steps",
            "noise_kind", "noise_beta", "noise_scale", "tail_fraction",
        )
        _reject_unknown(raw, allowed, "rates")
        c2 = raw.get("c2")
        return cls(
            kind=_str(raw.get("kind", "power-law"), "rates.kind"),
            p=_num(raw.get("p", 2.0), "rates.p"),
            c1=_num(raw.get("c1", 1.0), "rates.c1"),
            c2=_num(c2, "rates.c2") if c2 is not None else None,
            x0=_num(raw.get("x0", 1.0), "rates.x0"),
            steps=_int(raw.get("steps", 100000), "rates.steps"),
            noise_kind=_str(raw.get("noise_kind", "power-law"), "rates.noise_kind"),
            noise_beta=_num(raw.get("noise_beta", 1.0), "rates.noise_beta"),
            noise_scale=_num(raw.get("noise_scale", 1.0), "rates.noise_scale"),
            tail_fraction=_num(raw.get("tail_fraction", 0.9), "rates.tail_fraction"),
        )

    def build_regulator(self) -> RegulatorFn:
        if self.kind == "example-sqrt":
            return RegulatorFn.example_sqrt()
        return RegulatorFn.power_law(self.p, self.c1, self.c2)

    def build_bounds(self) -> np.ndarray:
        if self.noise_kind == "zero":
            return constant_bounds(self.steps, 0.0)
        if self.noise_kind == "constant":
            return constant_bounds(self.steps, self.noise_scale)
        return power_law_bounds(self.steps, self.noise_beta, self.noise_scale)

    def expected_slope(self) -> float | None:
        """Theoretical tail decay exponent, when the theory pins one down."""
        if self.noise_kind != "power-law":
            return None
        if self.kind == "example-sqrt":
            return None
        if self.p == 1.0:
            return -self.noise_beta
        return -min(1.0 / (self.p - 1.0), self.noise_beta / self.p)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p,
            "c1": self.c1,
            "c2": self.c2,
            "x0": self.x0,
            "steps": self.steps,
            "noise_kind": self.noise_kind,
            "noise_beta": self.noise_beta,
            "noise_scale": self.noise_scale,
            "tail_fraction": self.tail_fraction,
        }


@dataclass(frozen=True)
class ConcentrationSpec:
    sizes: tuple[int, ...] = (1, 10, 100)
    delta: float = 3.0
    trials: int = 10000

    def __post_init__(self):
        if len(self.sizes) == 0 or any(n < 1 for n in self.sizes):
            raise InputValidationError("concentration.sizes must be positive integers")
        if self.delta < 0.0:
            raise InputValidationError("concentration.delta must be nonnegative")
        if self.trials < 100:
            raise InputValidationError("concentration.trials must be at least 100")

    @classmethod
    def from_dict(cls, raw) -> "ConcentrationSpec":
        raw = _section(raw, "concentration")
        _reject_unknown(raw, ("sizes", "delta", "trials"), "concentration")
        sizes = raw.get("sizes", (1, 10, 100))
        return cls(
            sizes=_int_tuple(sizes, "concentration.sizes"),
            delta=_num(raw.get("delta", 3.0), "concentration.delta"),
            trials=_int(raw.get("trials", 10000), "concentration.trials"),
        )

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "delta": self.delta, "trials": self.trials}


@dataclass(frozen=True)
class TrainingSpec:
    rounds: int = 3
    candidates_per_round: int = 1000
    contamination: float = 0.3
    drift_scale: float = 1.0
    epochs: int = 1200
    hidden_dim: int = 64
    pca_k: int = 0
    lambda_contract: float = 1.0
    ess_weight: float = 0.0
    learning_rate: float = 3e-3
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.rounds < 1:
            raise InputValidationError("training.rounds must be positive")
        if self.candidates_per_round < 2:
            raise InputValidationError("training.candidates_per_round must be at least 2")
        if not 0.0 <= self.contamination < 1.0:
            raise InputValidationError("training.contamination must lie in [0, 1)")
        if self.epochs < 0 or self.hidden_dim < 1 or self.pca_k < 0:
            raise InputValidationError("training epochs/hidden_dim/pca_k out of range")
        if not 0.0 <= self.holdout_fraction <= 0.5:
            raise InputValidationError("training.holdout_fraction must lie in [0, 0.5]")

    @classmethod
    def from_dict(cls, raw) -> "TrainingSpec":
        raw = _section(raw, "training")
        allowed = (
            "rounds", "candidates_per_round", "contamination", "drift_scale", "epochs",
            "hidden_dim", "pca_k", "lambda_contract", "ess_weight", "learning_rate",
            "holdout_fraction",
        )
        _reject_unknown(raw, allowed, "training")
        return cls(
            rounds=_int(raw.get("rounds", 3), "training.rounds"),
            candidates_per_round=_int(
                raw.get("candidates_per_round", 1000), "training.candidates_per_round"
            ),
            contamination=_num(raw.get("contamination", 0.3), "training.contamination"),
            drift_scale=_num(raw.get("drift_scale", 1.0), "training.drift_scale"),
            epochs=_int(raw.get("epochs", 1200), "training.epochs"),
            hidden_dim=_int(raw.get("hidden_dim", 64), "training.hidden_dim"),
            pca_k=_int(raw.get("pca_k", 0), "training.pca_k"),
            lambda_contract=_num(raw.get("lambda_contract", 1.0), "training.lambda_contract"),
            ess_weight=_num(raw.get("ess_weight", 0.0), "training.ess_weight"),
            learning_rate=_num(raw.get("learning_rate", 3e-3), "training.learning_rate"),
            holdout_fraction=_num(raw.get("holdout_fraction", 0.25), "training.holdout_fraction"),
        )

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "candidates_per_round": self.candidates_per_round,
            "contamination": self.contamination,
            "drift_scale": self.drift_scale,
            "epochs": self.epochs,
            "hidden_dim": self.hidden_dim,
            "pca_k": self.pca_k,
            "lambda_contract": self.lambda_contract,
            "ess_weight": self.ess_weight,
            "learning_rate": self.learning_rate,
            "holdout_fraction": self.holdout_fraction,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a scenario run needs; seeds are always explicit."""

    scenario: str
    seed: int
    model: ModelSpec = field(default_factory=ModelSpec)
    horizon: int = 100
    trials: int = 100
    deltas: tuple[float, ...] = FIXED_DELTAS
    out_dir: str = "."
    initial_error: tuple[float, ...] | None = None
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    contraction: ContractionSpec = field(default_factory=ContractionSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    rates: RatesSpec = field(default_factory=RatesSpec)
    concentration: ConcentrationSpec = field(default_factory=ConcentrationSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InputValidationError(
                f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}"
            )
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise InputValidationError("seed must be an explicit integer (no clock defaults)")
        if not 0 <= self.seed < 2**64:
            raise InputValidationError("seed must fit in an unsigned 64-bit integer")
        if self.horizon < 1:
            raise InputValidationError("horizon must be positive")
        if self.trials < 1:
            raise InputValidationError("trials must be positive")
        if len(self.deltas) == 0 or any(d <= 0.0 for d in self.deltas):
            raise InputValidationError("deltas must be positive")
        if self.initial_error is not None and len(self.initial_error) != self.model.dim:
            raise InputValidationError("initial_error length must equal model.dim")
        if self.scenario == "workflow-filtered" and self.filter.kind == "none":
            raise InputValidationError("workflow-filtered requires filter.kind != 'none'")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise InputValidationError("config must be a mapping")
        allowed = (
            "scenario", "seed", "model", "horizon", "trials", "deltas", "out_dir",
            "initial_error", "schedule", "noise", "contraction", "filter", "rates",
            "concentration", "training",
        )
        _reject_unknown(raw, allowed, "config")
        if "scenario" not in raw:
            raise InputValidationError("config is missing required field 'scenario'")
        if "seed" not in raw:
            raise InputValidationError("config is missing required field 'seed'")
        initial_error = raw.get("initial_error")
        return cls(
            scenario=_str(raw["scenario"], "scenario"),
            seed=_int(raw["seed"], "seed"),
            model=ModelSpec.from_dict(raw.get("model")),
            horizon=_int(raw.get("horizon", 100), "horizon"),
            trials=_int(raw.get("trials", 100), "trials"),
            deltas=_float_tuple(raw.get("deltas", FIXED_DELTAS), "deltas"),
            out_dir=_str(raw.get("out_dir", "."), "out_dir"),
            initial_error=(
                _float_tuple(initial_error, "initial_error")
                if initial_error is not None
                else None
            ),
            schedule=ScheduleSpec.from_dict(raw.get("schedule")),
            noise=NoiseSpec.from_dict(raw.get("noise")),
            contraction=ContractionSpec.from_dict(raw.get("contraction")),
            filter=FilterSpec.from_dict(raw.get("filter")),
            rates=RatesSpec.from_dict(raw.get("rates")),
            concentration=ConcentrationSpec.from_dict(raw.get("concentration")),
            training=TrainingSpec.from_dict(raw.get("training")),
        )

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "horizon": self.horizon,
            "trials": self.trials,
            "deltas": list(self.deltas),
            "out_dir": self.out_dir,
            "initial_error": list(self.initial_error) if self.initial_error else None,
            "schedule": self.schedule.to_dict(),
            "noise": self.noise.to_dict(),
            "contraction": self.contraction.to_dict(),
            "filter": self.filter.to_dict(),
            "rates": self.rates.to_dict(),
            "concentration": self.concentration.to_dict(),
            "training": self.training.to_dict(),
        }


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def config_hash(config: ExperimentConfig) -> str:
    """12-hex content hash over everything except the output location."""
    payload = config.to_dict()
    payload.pop("out_dir")
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Result rows and files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    scenario: str
    t: int
    n_t: int
    mse: float
    mean_v: float
    exceed: tuple[float, float, float]
    trials: int
    config_hash: str


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see partials."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results_csv(rows: Sequence[ResultRow], path) -> None:
    if len(rows) == 0:
        raise InputValidationError("refusing to write an empty results table")
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.scenario},{r.t},{r.n_t},{_fmt(r.mse)},{_fmt(r.mean_v)},"
            f"{_fmt(r.exceed[0])},{_fmt(r.exceed[1])},{_fmt(r.exceed[2])},"
            f"{r.trials},{r.config_hash}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_results_csv(path) -> list[ResultRow]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputValidationError(f"cannot read results {path}: {exc}") from exc
    if not lines or lines[0] != CSV_HEADER:
        raise InputValidationError(f"{path} does not carry the expected results schema")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 10:
            raise InputValidationError(f"{path}:{i}: expected 10 columns")
        rows.append(
            ResultRow(
                scenario=parts[0],
                t=int(parts[1]),
                n_t=int(parts[2]),
                mse=float(parts[3]),
                mean_v=float(parts[4]),
                exceed=(float(parts[5]), float(parts[6]), float(parts[7])),
                trials=int(parts[8]),
                config_hash=parts[9],
            )
        )
    return rows


def write_summary(summary: dict, path) -> None:
    atomic_write_text(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Scenario pipelines
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ExperimentResult:
    rows: list[ResultRow]
    summary: dict
    paths: dict[str, str]


def _merged_deltas(config: ExperimentConfig) -> tuple[float, ...]:
    return tuple(sorted(set(float(d) for d in config.deltas) | set(FIXED_DELTAS)))


def _slope(ts: np.ndarray, ys: np.ndarray) -> float:
    return float(np.polyfit(np.asarray(ts, dtype=float), np.asarray(ys, dtype=float), 1)[0])


def _stats_rows(scenario, stats, trials, chash) -> list[ResultRow]:
    e1, e2, e3 = (stats.exceedance_at(d) for d in FIXED_DELTAS)
    return [
        ResultRow(
            scenario=scenario,
            t=int(stats.ts[i]),
            n_t=int(stats.ns[i]),
            mse=float(stats.mse[i]),
            mean_v=float(stats.mean_v[i]),
            exceed=(float(e1[i]), float(e2[i]), float(e3[i])),
            trials=trials,
            config_hash=chash,
        )
        for i in range(stats.ts.shape[0])
    ]


def _run_dynamics(config: ExperimentConfig, chash: str):
    dim = config.model.dim
    metric = LyapunovMetric.identity(dim)
    map_ = ContractionMap.scaled_identity(config.contraction.build(), metric)
    noise = config.noise.build(metric=None)
    e0 = (
        np.asarray(config.initial_error, dtype=float)
        if config.initial_error is not None
        else np.ones(dim)
    )
    stats = run_dynamics_trials(
        map_, noise, e0, config.horizon, config.trials, RngState(config.seed),
        deltas=_merged_deltas(config),
    )
    rows = _stats_rows("dynamics", stats, config.trials, chash)

    burn_in = max(1, config.horizon // 10)
    summary = {
        "scenario": "dynamics",
        "config_hash": chash,
        "trials": config.trials,
        "horizon": config.horizon,
        "final_mse": float(stats.mse[-1]),
        "final_mean_V": float(stats.mean_v[-1]),
        "exceedance_final": {_fmt(d): float(stats.exceedance_at(d)[-1]) for d in config.deltas},
        "burn_in": burn_in,
        "max_exceedance_rise_after_burn_in": exceedance_trend_rise(
            stats.exceedance_at(0.2), burn_in
        ),
    }
    return rows, summary


def exceedance_trend_rise(exceedance: np.ndarray, burn_in: int, blocks: int = 20) -> float:
    """Largest increase between successive block means of the tail curve.

    Per-step differences of a Monte-Carlo exceedance curve are dominated by
    trial-crossing noise, so the nonincreasing-trend verdict is taken on
    block averages of the post-burn-in steps instead.
    """
    tail = np.asarray(exceedance, dtype=float)[burn_in:]
    if tail.shape[0] < 2:
        return 0.0
    count = min(blocks, tail.shape[0])
    means = np.array([chunk.mean() for chunk in np.array_split(tail, count)])
    rises = np.diff(means)
    return float(rises.max()) if rises.size else 0.0


def _run_workflow(config: ExperimentConfig, chash: str):
    model, theta_star = config.model.build()
    schedule = config.schedule.build()
    handle = config.filter.build(theta_star)
    filtered = handle is not None
    stats = run_workflow_trials(
        model,
        theta_star,
        schedule,
        config.horizon,
        config.trials,
        RngState(config.seed),
        deltas=_merged_deltas(config),
        filter_handle=handle,
        candidates_per_round=config.filter.candidates_per_round if filtered else None,
    )
    scenario = "workflow-filtered" if filtered else "workflow"
    rows = _stats_rows(scenario, stats, config.trials, chash)

    half = config.horizon // 2
    summary = {
        "scenario": scenario,
        "config_hash": chash,
        "trials": config.trials,
        "horizon": config.horizon,
        "final_mse": float(stats.mse[-1]),
        "final_mean_V": float(stats.mean_v[-1]),
        "mse_slope": _slope(stats.ts, stats.mse),
        "mse_slope_last_half": _slope(stats.ts[half:], stats.mse[half:]),
        "exceedance_final": {_fmt(d): float(stats.exceedance_at(d)[-1]) for d in config.deltas},
    }
    if not filtered and config.schedule.kind == "constant":
        summary["expected_final_mse"] = config.model.dim * config.horizon / config.schedule.base
        summary["expected_mse_slope"] = config.model.dim / config.schedule.base
    return rows, summary


def _run_rates(config: ExperimentConfig, chash: str):
    spec = config.rates
    f = spec.build_regulator()
    bounds = spec.build_bounds()
    traj = recurrence_simulate(f, spec.x0, bounds, spec.steps)
    try:
        slope, r_squared = fit_decay_rate(traj, spec.tail_fraction)
    except InputValidationError:
        slope, r_squared = None, None

    deltas = FIXED_DELTAS
    rows = [
        ResultRow(
            scenario="rates",
            t=t,
            n_t=0,
            mse=float(traj[t]),
            mean_v=float(traj[t]),
            exceed=tuple(1.0 if traj[t] >= d else 0.0 for d in deltas),
            trials=1,
            config_hash=chash,
        )
        for t in range(traj.shape[0])
    ]
    summary = {
        "scenario": "rates",
        "config_hash": chash,
        "steps": spec.steps,
        "x0": spec.x0,
        "final_value": float(traj[-1]),
        "fitted_slope": slope,
        "r_squared": r_squared,
        "expected_slope": spec.expected_slope(),
    }
    if spec.noise_kind == "constant" and spec.noise_scale > 0.0:
        summary["limsup_ceiling"] = limsup_bound(f, spec.noise_scale)
    return rows, summary


def _run_concentration(config: ExperimentConfig, chash: str):
    model, theta = config.model.build()
    spec = config.concentration
    rng = RngState(config.seed)
    curve = measure_concentration(model, theta, spec.sizes, spec.delta, spec.trials, rng)
    # same substreams per size, so the fixed-delta columns share the draws
    fixed = [
        measure_concentration(model, theta, spec.sizes, d, spec.trials, rng)
        for d in FIXED_DELTAS
    ]
    rows = [
        ResultRow(
            scenario="concentration",
            t=i,
            n_t=int(n),
            mse=0.0,
            mean_v=0.0,
            exceed=tuple(float(fixed[j][i][1]) for j in range(3)),
            trials=spec.trials,
            config_hash=chash,
        )
        for i, (n, _) in enumerate(curve)
    ]
    exceed = [float(frac) for _, frac in curve]
    summary = {
        "scenario": "concentration",
        "config_hash": chash,
        "trials": spec.trials,
        "delta": spec.delta,
        "sizes": [int(n) for n, _ in curve],
        "exceedance": exceed,
        "monotone_nonincreasing": all(b <= a for a, b in zip(exceed, exceed[1:])),
    }
    return rows, summary


def _run_train_filter(config: ExperimentConfig, chash: str):
    model, theta_star = config.model.build()
    spec = config.training
    rng = RngState(config.seed)

    datasets, trace = simulate_drift_training_data(
        model,
        theta_star,
        spec.rounds,
        spec.candidates_per_round,
        spec.contamination,
        rng.derive(0),
        drift_scale=spec.drift_scale,
    )
    pool = merge_datasets(datasets)
    n_total = len(pool)
    n_hold = int(round(spec.holdout_fraction * n_total))
    perm = rng.derive(1).generator().permutation(n_total)
    hold_idx = np.sort(perm[:n_hold])
    train_idx = np.sort(perm[n_hold:])
    train_points, train_labels = pool.points[train_idx], pool.labels[train_idx]
    hold_points, hold_labels = pool.points[hold_idx], pool.labels[hold_idx]

    k = spec.pca_k if spec.pca_k > 0 else min(model.dim, 8)
    pca = fit_pca(train_points, k)
    train_ds = LabeledDataset(train_points, train_labels).with_features(pca)
    theta_est, theta_good = anchors_from_dataset(model, train_ds)
    train_config = TrainConfig(
        theta_good=theta_good,
        metric=LyapunovMetric.identity(model.dim),
        c_fn=config.contraction.build(),
        e_est=theta_est.theta - theta_good.theta,
        lambda_contract=spec.lambda_contract,
        ess_weight=spec.ess_weight,
        learning_rate=spec.learning_rate,
        epochs=spec.epochs,
        hidden_dim=spec.hidden_dim,
    )
    params, log = train_filter(train_ds, train_config, rng.derive(2))
    final = (
        log[-1][1:]
        if log
        else tuple(total_loss(params, train_ds, train_config))
    )

    weights = forward_batch(params, pca.transform(train_points))
    theta_new = expfam.weighted_estimate(model, train_points, weights)
    v_new = train_config.metric.value(theta_new.theta - theta_good.theta)
    threshold = train_config.contraction_threshold()
    certificate = bool(v_new <= threshold)

    if n_hold > 0:
        hold_pred = forward_batch(params, pca.transform(hold_points)) >= 0.5
        holdout_accuracy = float((hold_pred == (hold_labels == 1)).mean())
    else:
        holdout_accuracy = None

    meta = {
        "scenario": "train-filter",
        "family": model.family,
        "dim": model.dim,
        "seed": config.seed,
        "pca_k": k,
        "theta_good": theta_good.theta.tolist(),
        "e_est": train_config.e_est.tolist(),
        "training": spec.to_dict(),
        "contraction": config.contraction.to_dict(),
    }

    log_lines = [TRAINING_LOG_HEADER]
    for row in log:
        log_lines.append(
            f"{row.epoch},{_fmt(row.total)},{_fmt(row.class_part)},"
            f"{_fmt(row.contract_part)},{_fmt(row.ess_part)}"
        )

    summary = {
        "scenario": "train-filter",
        "config_hash": chash,
        "epochs": spec.epochs,
        "n_train": int(train_idx.shape[0]),
        "n_holdout": int(n_hold),
        "final_total_loss": float(final[0]),
        "final_class_loss": float(final[1]),
        "final_contract_loss": float(final[2]),
        "final_ess_loss": float(final[3]),
        "holdout_accuracy": holdout_accuracy,
        "contraction_certificate": certificate,
        "certified_v_new": float(v_new),
        "certified_threshold": float(threshold),
        "drift_trace_final": trace[-1].tolist(),
        "explained_variance_ratio": pca.explained_variance_ratio.tolist(),
    }
    artifacts = {
        "training_log": "\n".join(log_lines) + "\n",
        "checkpoint": (params, pca, meta),
    }
    return [], summary, artifacts


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Dispatch a validated config, write its artifacts, return rows + summary."""
    chash = config_hash(config)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    paths: dict[str, str] = {}

    if config.scenario == "train-filter":
        rows, summary, artifacts = _run_train_filter(config, chash)
        log_path = os.path.join(out, "training_log.csv")
        atomic_write_text(log_path, artifacts["training_log"])
        paths["training_log"] = log_path
        ckpt_path = os.path.join(out, "checkpoint.json")
        params, pca, meta = artifacts["checkpoint"]
        save_filter_checkpoint(ckpt_path, params, pca, meta)
        paths["checkpoint"] = ckpt_path
        summary["checkpoint"] = ckpt_path
    else:
        if config.scenario == "dynamics":
            rows, summary = _run_dynamics(config, chash)
        elif config.scenario in ("workflow", "workflow-filtered"):
            rows, summary = _run_workflow(config, chash)
        elif config.scenario == "rates":
            rows, summary = _run_rates(config, chash)
        elif config.scenario == "concentration":
            rows, summary = _run_concentration(config, chash)
        else:  # pragma: no cover - scenario set is closed by validation
            raise InputValidationError(f"unhandled scenario {config.scenario!r}")
        csv_path = os.path.join(out, "results.csv")
        write_results_csv(rows, csv_path)
        paths["results"] = csv_path

    summary_path = os.path.join(out, "summary.json")
    write_summary(summary, summary_path)
    paths["summary"] = summary_path
    return ExperimentResult(rows=rows, summary=summary, paths=paths)


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompareRow:
    t: int
    baseline_mse: float
    treatment_mse: float
    ratio: float


def compare_runs(baseline: Sequence[ResultRow], treatment: Sequence[ResultRow]):
    """Per-step baseline/treatment MSE ratios plus a trend verdict."""
    if len(baseline) == 0 or len(treatment) == 0:
        raise InputValidationError("both result tables must be nonempty")
    if len(baseline) != len(treatment):
        raise InputValidationError("result tables differ in row count")
    rows = []
    for b, tr in zip(baseline, treatment):
        if b.t != tr.t:
            raise InputValidationError(f"step grids differ at t={b.t} vs t={tr.t}")
        if b.mse == 0.0 and tr.mse == 0.0:
            ratio = 1.0
        elif tr.mse == 0.0:
            ratio = math.inf
        else:
            ratio = b.mse / tr.mse
        rows.append(CompareRow(b.t, b.mse, tr.mse, ratio))

    ts = np.array([r.t for r in rows], dtype=float)
    ratios = np.array([r.ratio for r in rows])
    finite = np.isfinite(ratios)
    trend = _slope(ts[finite], ratios[finite]) if finite.sum() >= 2 else None
    summary = {
        "steps": len(rows),
        "final_ratio": float(ratios[-1]),
        "ratio_trend_slope": trend,
        "trend_increasing": bool(trend is not None and trend > 0.0),
        "baseline_final_mse": rows[-1].baseline_mse,
        "treatment_final_mse": rows[-1].treatment_mse,
    }
    return rows, summary


def write_compare_csv(rows: Sequence[CompareRow], path) -> None:
    lines = [COMPARE_HEADER]
    for r in rows:
        lines.append(f"{r.t},{_fmt(r.baseline_mse)},{_fmt(r.treatment_mse)},{_fmt(r.ratio)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Plotting (deterministic SVG, no display server)
# ---------------------------------------------------------------------------

PLOT_KINDS = ("linear", "semilogy", "loglog")
PLOT_COLUMNS = ("mse", "mean_V", "exceed_0.1", "exceed_0.2", "exceed_0.5")

_SVG_W, _SVG_H, _SVG_M = 640.0, 480.0, 56.0


def _column_values(rows: Sequence[ResultRow], column: str) -> np.ndarray:
    if column == "mse":
        return np.array([r.mse for r in rows])
    if column == "mean_V":
        return np.array([r.mean_v for r in rows])
    idx = {f"exceed_{_fmt(d)}": i for i, d in enumerate(FIXED_DELTAS)}
    if column in idx:
        return np.array([r.exceed[idx[column]] for r in rows])
    raise InputValidationError(f"unknown plot column {column!r}; expected one of {PLOT_COLUMNS}")


def emit_plot(rows: Sequence[ResultRow], kind: str, path, column: str = "mse") -> None:
    """Render one polyline (vertex per row) with min/max axis labels as SVG."""
    if kind not in PLOT_KINDS:
        raise InputValidationError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if len(rows) == 0:
        raise InputValidationError("cannot plot an empty result table")
    xs = np.array([r.t for r in rows], dtype=float)
    ys = _column_values(rows, column)
    if not np.all(np.isfinite(ys)):
        raise InputValidationError("plot values must be finite")
    if kind == "loglog" and np.any(xs <= 0.0):
        raise InputValidationError("loglog requires positive step values; trim t=0 rows first")
    if kind in ("semilogy", "loglog") and np.any(ys <= 0.0):
        raise InputValidationError(f"{kind} requires positive {column} values")

    px = np.log10(xs) if kind == "loglog" else xs
    py = np.log10(ys) if kind in ("semilogy", "loglog") else ys

    def scaled(v: np.ndarray, lo: float, hi: float, a: float, b: float) -> np.ndarray:
        if hi == lo:
            return np.full(v.shape, 0.5 * (a + b))
        return a + (v - lo) / (hi - lo) * (b - a)

    sx = scaled(px, float(px.min()), float(px.max()), _SVG_M, _SVG_W - _SVG_M)
    sy = scaled(py, float(py.min()), float(py.max()), _SVG_H - _SVG_M, _SVG_M)
    points = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(sx, sy))

    frame = (
        f'<rect x="{_SVG_M}" y="{_SVG_M}" width="{_SVG_W - 2 * _SVG_M}" '
        f'height="{_SVG_H - 2 * _SVG_M}" fill="none" stroke="#444" stroke-width="1"/>'
    )
    labels = (
        f'<text x="{_SVG_M}" y="{_SVG_H - _SVG_M + 18}" font-size="11" '
        f'font-family="monospace">t={_fmt(xs.min())}</text>'
        f'<text x="{_SVG_W - _SVG_M}" y="{_SVG_H - _SVG_M + 18}" font-size="11" '
        f'font-family="monospace" text-anchor="end">t={_fmt(xs.max())}</text>'
        f'<text x="{_SVG_M - 6}" y="{_SVG_H - _SVG_M}" font-size="11" '
        f'font-family="monospace" text-anchor="end">{_fmt(ys.min())}</text>'
        f'<text x="{_SVG_M - 6}" y="{_SVG_M + 4}" font-size="11" '
        f'font-family="monospace" text-anchor="end">{_fmt(ys.max())}</text>'
        f'<text x="{_SVG_W / 2}" y="{_SVG_M - 12}" font-size="12" '
        f'font-family="monospace" text-anchor="middle">{column} ({kind})</text>'
    )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W:.0f}" '
        f'height="{_SVG_H:.0f}" viewBox="0 0 {_SVG_W:.0f} {_SVG_H:.0f}">\n'
        f'<rect width="{_SVG_W:.0f}" height="{_SVG_H:.0f}" fill="#ffffff"/>\n'
        f"{frame}\n{labels}\n"
        f'<polyline fill="none" stroke="#1f6feb" stroke-width="1.5" points="{points}"/>\n'
        "</svg>\n"
    )
    atomic_write_text(path, svg)


# ---------------------------------------------------------------------------
# Acceptance checks (--check)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} {self.name}: measured={_fmt(self.measured)} "
            f"threshold={_fmt(self.threshold)} ({self.detail})"
        )


def _within(name, measured, expected, rel, detail) -> CheckResult:
    tol = abs(rel * expected)
    return CheckResult(
        name=name,
        passed=abs(measured - expected) <= tol,
        measured=measured,
        threshold=tol,
        detail=f"{detail}; |measured - {_fmt(expected)}| must be <= {_fmt(tol)}",
    )


def run_checks(config: ExperimentConfig, summary: dict) -> list[CheckResult]:
    """Named pass/fail verdicts applicable to this scenario's summary."""
    checks: list[CheckResult] = []
    scenario = config.scenario

    if scenario == "workflow" and "expected_final_mse" in summary:
        checks.append(
            _within(
                "workflow-final-mse",
                summary["final_mse"],
                summary["expected_final_mse"],
                0.15,
                "closed-form dim*T/n baseline",
            )
        )
        checks.append(
            _within(
                "workflow-mse-slope",
                summary["mse_slope"],
                summary["expected_mse_slope"],
                0.15,
                "closed-form dim/n growth per step",
            )
        )
    elif scenario == "workflow-filtered" and config.filter.kind == "oracle-pullback":
        slope = summary["mse_slope_last_half"]
        checks.append(
            CheckResult(
                "filtered-mse-slope-last-half",
                passed=slope <= 0.0,
                measured=slope,
                threshold=0.0,
                detail="late-run MSE trend must be flat or falling",
            )
        )
    elif scenario == "dynamics":
        final = summary["exceedance_final"].get(_fmt(0.2))
        if final is not None:
            checks.append(
                CheckResult(
                    "dynamics-final-exceedance-0.2",
                    passed=final <= 0.05,
                    measured=final,
                    threshold=0.05,
                    detail="terminal exceedance fraction at delta=0.2",
                )
            )
        rise = summary["max_exceedance_rise_after_burn_in"]
        checks.append(
            CheckResult(
                "dynamics-exceedance-monotone",
                passed=rise <= 0.02,
                measured=rise,
                threshold=0.02,
                detail="largest block-mean exceedance increase after burn-in",
            )
        )
    elif scenario == "rates":
        expected = summary.get("expected_slope")
        fitted = summary.get("fitted_slope")
        if expected is not None and fitted is not None:
            checks.append(
                CheckResult(
                    "rates-decay-slope",
                    passed=abs(fitted - expected) <= 0.1,
                    measured=fitted,
                    threshold=0.1,
                    detail=f"log-log tail slope vs theory {_fmt(expected)}",
                )
            )
    elif scenario == "concentration":
        checks.append(
            CheckResult(
                "concentration-monotone",
                passed=bool(summary["monotone_nonincreasing"]),
                measured=1.0 if summary["monotone_nonincreasing"] else 0.0,
                threshold=1.0,
                detail="exceedance must not increase with sample size",
            )
        )
        tail_applicable = (
            config.model.family == expfam.GAUSSIAN
            and config.model.dim == 1
            and config.concentration.delta == 3.0
            and config.concentration.sizes[:1] == (1,)
        )
        if tail_applicable:
            measured = summary["exceedance"][0]
            checks.append(
                CheckResult(
                    "concentration-gaussian-tail",
                    passed=abs(measured - GAUSSIAN_TAIL_3) <= 0.002,
                    measured=measured,
                    threshold=0.002,
                    detail=f"two-sided normal tail at 3 sigma, oracle {_fmt(GAUSSIAN_TAIL_3)}",
                )
            )
    elif scenario == "train-filter":
        checks.append(
            CheckResult(
                "train-contract-final",
                passed=summary["final_contract_loss"] <= 1e-6,
                measured=summary["final_contract_loss"],
                threshold=1e-6,
                detail="contraction hinge at the final epoch",
            )
        )
        acc = summary.get("holdout_accuracy")
        if acc is not None:
            checks.append(
                CheckResult(
                    "train-holdout-accuracy",
                    passed=acc >= 0.90,
                    measured=acc,
                    threshold=0.90,
                    detail="held-out classification accuracy",
                )
            )
        checks.append(
            CheckResult(
                "train-contraction-certificate",
                passed=bool(summary["contraction_certificate"]),
                measured=1.0 if summary["contraction_certificate"] else 0.0,
                threshold=1.0,
                detail="independently recomputed weighted-estimate inequality",
            )
        )
    return checks


def compare_checks(summary: dict) -> list[CheckResult]:
    """Checks for a baseline-vs-treatment comparison summary."""
    checks = [
        CheckResult(
            "compare-final-ratio",
            passed=summary["final_ratio"] > 5.0,
            measured=summary["final_ratio"],
            threshold=5.0,
            detail="terminal unfiltered/filtered MSE ratio",
        )
    ]
    trend = summary.get("ratio_trend_slope")
    checks.append(
        CheckResult(
            "compare-trend-increasing",
            passed=bool(trend is not None and trend > 0.0),
            measured=trend if trend is not None else math.nan,
            threshold=0.0,
            detail="improvement ratio least-squares slope",
        )
    )
    return checks


def ensure_checks_pass(checks: Sequence[CheckResult]) -> None:
    failed = [c for c in checks if not c.passed]
    if failed:
        raise CheckFailureError(
            "; ".join(f"{c.name} measured={_fmt(c.measured)} threshold={_fmt(c.threshold)}" for c in failed)
        )
