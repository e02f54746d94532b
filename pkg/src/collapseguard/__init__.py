"""collapseguard: simulation and verification toolkit for contraction-regulated
recursive training loops.

The package splits into numeric plumbing (``numerics``), exponential-family
estimation (``expfam``), contraction and rate machinery (``contraction``),
error-dynamics and workflow Monte-Carlo (``dynamics``), the learnable sample
filter (``filtering``), and the config-driven experiment harness
(``experiments``/``cli``).
"""

from .contraction import (
    ContractionFn,
    ContractionMap,
    LyapunovMetric,
    RegulatorFn,
    check_matrix_contraction,
    check_regulation,
    fit_decay_rate,
    limsup_bound,
    measure_concentration,
    recurrence_simulate,
)
from .dynamics import (
    ErrorTrajectory,
    NoiseSchedule,
    SampleSchedule,
    TrialStats,
    run_dynamics_trials,
    run_workflow,
    run_workflow_filtered,
    run_workflow_trials,
    simulate_error_dynamics,
)
from .errors import (
    BoundaryError,
    CheckFailureError,
    CollapseGuardError,
    DegenerateSelectionError,
    InputValidationError,
    SimulationOverflowError,
)
from .expfam import (
    ExpFamilyModel,
    Parameter,
    estimate,
    inverse_mean_map,
    mean_map,
    sample,
    sufficient_stat,
    weighted_estimate,
)
from .experiments import (
    ExperimentConfig,
    ResultRow,
    compare_runs,
    config_hash,
    emit_plot,
    run_checks,
    run_experiment,
)
from .filtering import (
    FilterHandle,
    FilterParams,
    LabeledDataset,
    PCATransform,
    TrainConfig,
    fit_pca,
    forward,
    forward_batch,
    label_by_distance,
    load_filter_checkpoint,
    oracle_pullback_weights,
    save_filter_checkpoint,
    simulate_drift_training_data,
    total_loss,
    train_filter,
)
from .numerics import RngState, gaussian_sample, is_spd, quad_form, sym_eig

__version__ = "0.1.0"

__all__ = [
    "BoundaryError",
    "CheckFailureError",
    "CollapseGuardError",
    "ContractionFn",
    "ContractionMap",
    "DegenerateSelectionError",
    "ErrorTrajectory",
    "ExpFamilyModel",
    "ExperimentConfig",
    "FilterHandle",
    "FilterParams",
    "InputValidationError",
    "LabeledDataset",
    "LyapunovMetric",
    "NoiseSchedule",
    "PCATransform",
    "Parameter",
    "RegulatorFn",
    "ResultRow",
    "RngState",
    "SampleSchedule",
    "SimulationOverflowError",
    "TrainConfig",
    "TrialStats",
    "check_matrix_contraction",
    "check_regulation",
    "compare_runs",
    "config_hash",
    "emit_plot",
    "estimate",
    "fit_decay_rate",
    "fit_pca",
    "forward",
    "forward_batch",
    "gaussian_sample",
    "inverse_mean_map",
    "is_spd",
    "label_by_distance",
    "limsup_bound",
    "load_filter_checkpoint",
    "mean_map",
    "measure_concentration",
    "oracle_pullback_weights",
    "quad_form",
    "recurrence_simulate",
    "run_checks",
    "run_dynamics_trials",
    "run_experiment",
    "run_workflow",
    "run_workflow_filtered",
    "run_workflow_trials",
    "sample",
    "save_filter_checkpoint",
    "simulate_drift_training_data",
    "simulate_error_dynamics",
    "sufficient_stat",
    "sym_eig",
    "total_loss",
    "train_filter",
    "weighted_estimate",
]
