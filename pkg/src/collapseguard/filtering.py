"""Learnable sample filter: PCA features, a tiny MLP, and its training loop.

The filter scores each candidate point with a weight in (0, 1). Training
couples an ordinary binary cross-entropy on good/bad labels with a hinge
penalty that activates whenever the weighted re-estimate would break the
per-step Lyapunov contraction around a frozen training anchor, plus an
optional effective-sample-size term. All gradients are written out by
hand (the whole computation is a few matmuls); Adam does the stepping.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import expfam
from .contraction import ContractionFn, LyapunovMetric
from .errors import DegenerateSelectionError, InputValidationError
from .numerics import RngState, as_generator, as_vector, sym_eig

CHECKPOINT_VERSION = 1

PROB_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# PCA front-end
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PCATransform:
    """Standardize-then-project feature map fitted on training candidates."""

    mean: np.ndarray
    scale: np.ndarray
    projection: np.ndarray
    explained_variance_ratio: np.ndarray
    zero_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.projection.shape[1]

    def transform(self, x) -> np.ndarray:
        data = np.asarray(x, dtype=float)
        single = data.ndim == 1
        if single:
            data = data[None, :]
        if data.ndim != 2 or data.shape[1] != self.input_dim:
            raise InputValidationError(
                f"points must have dimension {self.input_dim}, got shape {np.asarray(x).shape}"
            )
        z = ((data - self.mean) / self.scale) @ self.projection
        return z[0] if single else z

    def inverse_transform(self, z) -> np.ndarray:
        feats = np.asarray(z, dtype=float)
        single = feats.ndim == 1
        if single:
            feats = feats[None, :]
        if feats.shape[1] != self.k:
            raise InputValidationError(f"features must have dimension {self.k}")
        x = feats @ self.projection.T * self.scale + self.mean
        return x[0] if single else x


def fit_pca(data, k: int) -> PCATransform:
    """Fit standardization and the top-k covariance eigendirections.

    Needs at least k+1 points and 1 <= k <= dim. Zero-variance coordinates
    are flagged and left unscaled rather than divided by zero.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise InputValidationError("data must be a 2-d array of points")
    n, d = x.shape
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= d:
        raise InputValidationError(f"k must lie in [1, {d}]")
    if n < k + 1:
        raise InputValidationError(f"need at least {k + 1} points to fit k={k} components")
    if not np.all(np.isfinite(x)):
        raise InputValidationError("data must be finite")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    zero_variance = std == 0.0
    scale = np.where(zero_variance, 1.0, std)
    centered = (x - mean) / scale
    cov = centered.T @ centered / (n - 1)
    values, vectors = sym_eig(cov)
    order = np.argsort(values, kind="stable")[::-1]
    values = values[order]
    vectors = vectors[:, order]
    total = float(np.clip(values, 0.0, None).sum())
    ratios = np.clip(values[:k], 0.0, None) / total if total > 0.0 else np.zeros(k)
    return PCATransform(
        mean=mean,
        scale=scale,
        projection=vectors[:, :k].copy(),
        explained_variance_ratio=ratios,
        zero_variance=zero_variance,
    )


# ---------------------------------------------------------------------------
# Labeled data
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LabeledDataset:
    """Candidate points with 0/1 labels and (optionally) extracted features."""

    points: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        labels = np.asarray(self.labels)
        if pts.ndim != 2 or labels.shape != (pts.shape[0],):
            raise InputValidationError("points must be (n, d) with one label per point")
        if not np.all((labels == 0) | (labels == 1)):
            raise InputValidationError("labels must be 0 or 1")
        self.points = pts
        self.labels = labels.astype(np.int64)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise InputValidationError("features must align with points row-wise")
            self.features = feats

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_features(self, pca: PCATransform) -> "LabeledDataset":
        return LabeledDataset(self.points, self.labels, pca.transform(self.points))


def label_by_distance(candidates, reference: expfam.Parameter, good_fraction: float) -> LabeledDataset:
    """Mark the ceil(good_fraction * n) points nearest the reference mean as good.

    Distance is Euclidean to mean_map(reference); ties resolve by original
    index (stable sort), so labeling is deterministic.
    """
    pts = np.asarray(candidates, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise InputValidationError("candidates must be a non-empty (n, d) array")
    if not 0.0 < good_fraction <= 1.0:
        raise InputValidationError("good_fraction must lie in (0, 1]")
    anchor = expfam.mean_map(reference.model, reference)
    if pts.shape[1] != anchor.shape[0]:
        raise InputValidationError("candidates dimension does not match the reference model")
    dist = np.linalg.norm(pts - anchor[None, :], axis=1)
    keep = int(math.ceil(good_fraction * pts.shape[0]))
    order = np.argsort(dist, kind="stable")
    labels = np.zeros(pts.shape[0], dtype=np.int64)
    labels[order[:keep]] = 1
    return LabeledDataset(pts, labels)


# ---------------------------------------------------------------------------
# MLP parameters and forward pass
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FilterParams:
    """Weights of the two-layer scorer: sigmoid(w2 . relu(W1 z + b1) + b2)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=float)
        b1 = np.asarray(self.b1, dtype=float)
        w2 = np.asarray(self.w2, dtype=float)
        if w1.ndim != 2:
            raise InputValidationError("w1 must be (hidden, features)")
        h = w1.shape[0]
        if b1.shape != (h,) or w2.shape != (h,):
            raise InputValidationError("b1 and w2 must have one entry per hidden unit")
        self.w1, self.b1, self.w2 = w1, b1, w2
        self.b2 = float(self.b2)

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "FilterParams":
        return FilterParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)


def init_filter_params(feature_dim: int, hidden_dim: int, rng) -> FilterParams:
    """Uniform(-a, a) layers with a = sqrt(6 / (fan_in + fan_out)), zero biases."""
    if feature_dim < 1 or hidden_dim < 1:
        raise InputValidationError("feature_dim and hidden_dim must be positive")
    gen = as_generator(rng)
    lim1 = math.sqrt(6.0 / (feature_dim + hidden_dim))
    lim2 = math.sqrt(6.0 / (hidden_dim + 1))
    return FilterParams(
        w1=gen.uniform(-lim1, lim1, size=(hidden_dim, feature_dim)),
        b1=np.zeros(hidden_dim),
        w2=gen.uniform(-lim2, lim2, size=hidden_dim),
        b2=0.0,
    )


def _forward_cache(params: FilterParams, feats: np.ndarray):
    pre = feats @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.w2 + params.b2
    weights = np.empty_like(logits)
    pos = logits >= 0.0
    weights[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    exp_neg = np.exp(logits[~pos])
    weights[~pos] = exp_neg / (1.0 + exp_neg)
    return pre, hidden, logits, weights


def forward(params: FilterParams, z) -> float:
    """Score one feature vector; output is strictly inside (0, 1)."""
    feats = as_vector(z, dim=params.feature_dim, name="z")
    return float(_forward_cache(params, feats[None, :])[3][0])


def forward_batch(params: FilterParams, features) -> np.ndarray:
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != params.feature_dim:
        raise InputValidationError(f"features must be (n, {params.feature_dim})")
    return _forward_cache(params, feats)[3]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


class LossParts(NamedTuple):
    total: float
    class_part: float
    contract_part: float
    ess_part: float


@dataclass(eq=False)
class TrainConfig:
    """Everything train_filter needs besides the data.

    ``e_est`` may start as None; train_filter resolves it once from the
    full candidate set before the first epoch and freezes it. The loss
    functions themselves require a resolved anchor.
    """

    theta_good: expfam.Parameter
    metric: LyapunovMetric
    c_fn: ContractionFn = field(default_factory=ContractionFn.example_sqrt)
    e_est: np.ndarray | None = None
    lambda_contract: float = 1.0
    ess_weight: float = 0.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 500
    hidden_dim: int = 128

    def __post_init__(self):
        if self.metric.dim != self.theta_good.model.dim:
            raise InputValidationError("metric dimension must match the model dimension")
        if self.e_est is not None:
            self.e_est = as_vector(self.e_est, dim=self.metric.dim, name="e_est")
        if self.lambda_contract < 0.0 or self.ess_weight < 0.0:
            raise InputValidationError("loss weights must be nonnegative")
        if self.learning_rate <= 0.0 or not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise InputValidationError("invalid Adam hyperparameters")
        if self.eps <= 0.0:
            raise InputValidationError("eps must be positive")
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 0:
            raise InputValidationError("epochs must be a nonnegative integer")
        if not isinstance(self.hidden_dim, (int, np.integer)) or self.hidden_dim < 1:
            raise InputValidationError("hidden_dim must be a positive integer")

    @property
    def model(self) -> expfam.ExpFamilyModel:
        return self.theta_good.model

    def contraction_threshold(self) -> float:
        """The frozen hinge level (1 - c(e_est)) V(e_est)."""
        if self.e_est is None:
            raise InputValidationError("e_est anchor is unresolved; train_filter sets it")
        v_est = self.metric.value(self.e_est)
        c_est = self.c_fn.value(self.metric, self.e_est)
        return (1.0 - c_est) * v_est


def _require_features(dataset: LabeledDataset) -> np.ndarray:
    if dataset.features is None:
        raise InputValidationError("dataset has no features; apply a PCATransform first")
    return dataset.features


def classification_loss(params: FilterParams, dataset: LabeledDataset) -> float:
    """Mean binary cross-entropy; probabilities clamped only inside the logs."""
    weights = forward_batch(params, _require_features(dataset))
    return _bce(weights, dataset.labels)


def _bce(weights: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(weights, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.astype(float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def contraction_loss(
    params: FilterParams,
    dataset: LabeledDataset,
    config: TrainConfig,
) -> float:
    """Hinge on the certified decrease: max(0, V(e_new) - (1 - c(e_est)) V(e_est)).

    e_new comes from the weighted re-estimate under the current forward
    weights; the threshold side is frozen at the config anchor.
    """
    weights = forward_batch(params, _require_features(dataset))
    theta_new = expfam.weighted_estimate(config.model, dataset.points, weights)
    e_new = theta_new.theta - config.theta_good.theta
    v_new = config.metric.value(e_new)
    return max(0.0, v_new - config.contraction_threshold())


def _ess_term(weights: np.ndarray) -> float:
    s1 = float(weights.sum())
    s2 = float((weights * weights).sum())
    if s2 == 0.0:
        return 1.0
    return 1.0 - (s1 * s1 / s2) / weights.shape[0]


def total_loss(params: FilterParams, dataset: LabeledDataset, config: TrainConfig) -> LossParts:
    """class + lambda * contract + mu * ess, with the parts reported separately."""
    feats = _require_features(dataset)
    weights = _forward_cache(params, feats)[3]
    class_part = _bce(weights, dataset.labels)
    theta_new = expfam.weighted_estimate(config.model, dataset.points, weights)
    e_new = theta_new.theta - config.theta_good.theta
    contract_part = max(0.0, config.metric.value(e_new) - config.contraction_threshold())
    ess_part = _ess_term(weights)
    total = class_part + config.lambda_contract * contract_part + config.ess_weight * ess_part
    return LossParts(total, class_part, contract_part, ess_part)


def loss_gradient(params: FilterParams, dataset: LabeledDataset, config: TrainConfig) -> FilterParams:
    """Exact gradient of total_loss in the shape of FilterParams.

    Chain rule through sigmoid, ReLU, the weighted mean, and the inverse
    mean map (diagonal Jacobian 1/variance per coordinate). The clamp in
    the cross-entropy is treated as inactive, which it is everywhere the
    sigmoid has representable slack.
    """
    feats = _require_features(dataset)
    pre, hidden, _, weights = _forward_cache(params, feats)
    n = feats.shape[0]
    y = dataset.labels.astype(float)

    # d(loss)/d(logit) for the classification part
    dlogit = (weights - y) / n

    # contraction part, active only past the hinge
    if config.lambda_contract > 0.0:
        model = config.model
        s1 = float(weights.sum())
        floor = expfam.WEIGHT_FLOOR_PER_POINT * n
        if s1 <= floor:
            raise DegenerateSelectionError(
                f"weight sum {s1:.3e} is at or below the floor {floor:.3e}"
            )
        scaled = weights / weights.max()
        tbar = (dataset.points * scaled[:, None]).sum(axis=0) / scaled.sum()
        theta_new = expfam.inverse_mean_map(model, tbar)
        e_new = theta_new.theta - config.theta_good.theta
        v_new = config.metric.value(e_new)
        if v_new - config.contraction_threshold() > 0.0:
            g_theta = 2.0 * (config.metric.p_matrix @ e_new)
            g_tbar = g_theta / expfam._mean_slope(model.family, theta_new.theta)
            g_w = (dataset.points - tbar[None, :]) @ g_tbar / s1
            dlogit = dlogit + config.lambda_contract * g_w * weights * (1.0 - weights)

    # effective-sample-size part
    if config.ess_weight > 0.0:
        s1 = float(weights.sum())
        s2 = float((weights * weights).sum())
        if s2 > 0.0:
            g_w = -(2.0 * s1 * s2 - s1 * s1 * 2.0 * weights) / (n * s2 * s2)
            dlogit = dlogit + config.ess_weight * g_w * weights * (1.0 - weights)

    g_w2 = hidden.T @ dlogit
    g_b2 = float(dlogit.sum())
    dpre = (dlogit[:, None] * params.w2[None, :]) * (pre > 0.0)
    g_w1 = dpre.T @ feats
    g_b1 = dpre.sum(axis=0)
    return FilterParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


# ---------------------------------------------------------------------------
# Adam and the training loop
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    m: FilterParams
    v: FilterParams
    step: int = 0

    @classmethod
    def zeros_like(cls, params: FilterParams) -> "AdamState":
        zero = lambda a: np.zeros_like(a)
        return cls(
            m=FilterParams(zero(params.w1), zero(params.b1), zero(params.w2), 0.0),
            v=FilterParams(zero(params.w1), zero(params.b1), zero(params.w2), 0.0),
            step=0,
        )


def adam_step(
    params: FilterParams,
    grad: FilterParams,
    state: AdamState,
    config: TrainConfig,
) -> tuple[FilterParams, AdamState]:
    """One bias-corrected Adam update; zero gradient leaves params unchanged."""
    t = state.step + 1
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t

    def update(p, g, m, v):
        m_new = b1 * m + (1.0 - b1) * g
        v_new = b2 * v + (1.0 - b2) * (g * g)
        p_new = p - lr * (m_new / corr1) / (np.sqrt(v_new / corr2) + eps)
        return p_new, m_new, v_new

    new_w1, m_w1, v_w1 = update(params.w1, grad.w1, state.m.w1, state.v.w1)
    new_b1, m_b1, v_b1 = update(params.b1, grad.b1, state.m.b1, state.v.b1)
    new_w2, m_w2, v_w2 = update(params.w2, grad.w2, state.m.w2, state.v.w2)
    b2s, m_b2, v_b2 = update(
        np.array(params.b2), np.array(grad.b2), np.array(state.m.b2), np.array(state.v.b2)
    )
    new_params = FilterParams(new_w1, new_b1, new_w2, float(b2s))
    new_state = AdamState(
        m=FilterParams(m_w1, m_b1, m_w2, float(m_b2)),
        v=FilterParams(v_w1, v_b1, v_w2, float(v_b2)),
        step=t,
    )
    return new_params, new_state


class TrainLogRow(NamedTuple):
    epoch: int
    total: float
    class_part: float
    contract_part: float
    ess_part: float


def resolve_anchor(dataset: LabeledDataset, config: TrainConfig) -> TrainConfig:
    """Fill in e_est from the full candidate set if the config left it open."""
    if config.e_est is not None:
        return config
    theta_est = expfam.estimate(config.model, dataset.points)
    return replace(config, e_est=theta_est.theta - config.theta_good.theta)


def anchors_from_dataset(
    model: expfam.ExpFamilyModel, dataset: LabeledDataset
) -> tuple[expfam.Parameter, expfam.Parameter]:
    """(theta_est from all points, theta_good from the good-labeled points)."""
    good = dataset.points[dataset.labels == 1]
    if good.shape[0] == 0:
        raise InputValidationError("dataset has no good-labeled points")
    return expfam.estimate(model, dataset.points), expfam.estimate(model, good)


def train_filter(
    dataset: LabeledDataset,
    config: TrainConfig,
    rng,
) -> tuple[FilterParams, list[TrainLogRow]]:
    """Full-batch Adam on total_loss for config.epochs updates.

    The log holds one row per completed epoch, evaluated after that
    epoch's update, so log[-1] is the training loss of the returned
    parameters and epochs=0 yields an empty log. Datasets with a single
    class are rejected (the classification target would be degenerate).
    """
    feats = _require_features(dataset)
    labels = dataset.labels
    if labels.min() == labels.max():
        raise InputValidationError("training data must contain both classes")
    config = resolve_anchor(dataset, config)
    params = init_filter_params(feats.shape[1], config.hidden_dim, rng)
    state = AdamState.zeros_like(params)
    log: list[TrainLogRow] = []
    for epoch in range(1, config.epochs + 1):
        grad = loss_gradient(params, dataset, config)
        params, state = adam_step(params, grad, state, config)
        parts = total_loss(params, dataset, config)
        log.append(TrainLogRow(epoch, *parts))
    return params, log


# ---------------------------------------------------------------------------
# Oracle pullback
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PullbackResult:
    """Weights plus the pull actually realized (projected on the offset line)."""

    weights: np.ndarray
    achieved_gamma: float
    target_reached: bool


def oracle_pullback_weights(
    candidates, theta_good: expfam.Parameter, gamma: float, tol: float = 1e-8
) -> PullbackResult:
    """Weights whose weighted mean lands at anchor + (1-gamma)(mean - anchor).

    Solves for a linear tilt of the weights along the candidate spread
    (clipped to [0, 1], around a 0.5 base) by damped Newton iteration on
    the weighted-mean residual; when clipping makes the target unreachable
    it falls back to the nearest prefix subset and reports the achieved
    pull instead of failing.
    """
    pts = np.asarray(candidates, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InputValidationError("candidates must be an (n, d) array with n >= 2")
    if not np.all(np.isfinite(pts)):
        raise InputValidationError("candidates must be finite")
    if not 0.0 <= gamma <= 1.0:
        raise InputValidationError("gamma must lie in [0, 1]")
    n = pts.shape[0]
    anchor = expfam.mean_map(theta_good.model, theta_good)
    if pts.shape[1] != anchor.shape[0]:
        raise InputValidationError("candidates dimension does not match the anchor model")

    mean = pts.mean(axis=0)
    offset = mean - anchor
    offset_sq = float(offset @ offset)
    if gamma == 0.0 or offset_sq == 0.0:
        return PullbackResult(np.ones(n), gamma, True)

    centered = pts - mean
    spread = centered.T @ centered / n
    if float(np.trace(spread)) <= 0.0:
        raise InputValidationError("candidate cloud has no spread; cannot tilt weights")
    target = mean - gamma * offset

    base = 0.5
    floor = expfam.WEIGHT_FLOOR_PER_POINT * n
    tol_abs = tol * (1.0 + float(np.linalg.norm(target)))

    def residual(tilt_vec):
        w = np.clip(base + centered @ tilt_vec, 0.0, 1.0)
        s = float(w.sum())
        if s <= floor:
            return w, None, np.inf
        wmean = (pts * w[:, None]).sum(axis=0) / s
        return w, wmean, float(np.linalg.norm(target - wmean))

    tilt = base * _solve_psd(spread, -gamma * offset)
    weights, wmean, rnorm = residual(tilt)
    reached = rnorm <= tol_abs
    for _ in range(200):
        if reached or wmean is None:
            break
        interior = (weights > 0.0) & (weights < 1.0)
        if not interior.any():
            break
        s = float(weights.sum())
        jac = (pts[interior] - wmean).T @ centered[interior] / s
        try:
            step = np.linalg.solve(jac, target - wmean)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(jac, target - wmean, rcond=None)
        # backtrack: clipping makes the system only piecewise linear, so a
        # full Newton step can overshoot into a different saturation pattern
        scale, improved = 1.0, False
        for _ in range(40):
            cand_w, cand_mean, cand_norm = residual(tilt + scale * step)
            if cand_norm < rnorm:
                tilt = tilt + scale * step
                weights, wmean, rnorm = cand_w, cand_mean, cand_norm
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        reached = rnorm <= tol_abs

    if not reached:
        fallback = _nearest_prefix_weights(pts, target)
        fallback_norm = float(np.linalg.norm(target - fallback @ pts / fallback.sum()))
        if fallback_norm < rnorm:
            weights = fallback

    s = float(weights.sum())
    if s <= expfam.WEIGHT_FLOOR_PER_POINT * n:
        raise DegenerateSelectionError("pullback produced an empty selection")
    wmean = (pts * weights[:, None]).sum(axis=0) / s
    achieved = 1.0 - float((wmean - anchor) @ offset) / offset_sq
    reached = float(np.linalg.norm(target - wmean)) <= tol * (1.0 + float(np.linalg.norm(target)))
    return PullbackResult(weights, achieved, reached)


def _solve_psd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        x, *_ = np.linalg.lstsq(a, b, rcond=None)
        return x


def _nearest_prefix_weights(pts: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Binary weights on the k nearest points to the target, best k by prefix mean."""
    dist = np.linalg.norm(pts - target[None, :], axis=1)
    order = np.argsort(dist, kind="stable")
    prefix = np.cumsum(pts[order], axis=0) / np.arange(1, pts.shape[0] + 1)[:, None]
    gaps = np.linalg.norm(prefix - target[None, :], axis=1)
    best = int(np.argmin(gaps))
    weights = np.zeros(pts.shape[0])
    weights[order[: best + 1]] = 1.0
    return weights


# ---------------------------------------------------------------------------
# Deployable filter handles
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FilterHandle:
    """A uniform wrapper the workflow loop can call for weights.

    Kinds: ``mlp`` (trained scorer behind its PCA), ``oracle-pullback``
    (needs the anchor parameter, so it is for diagnostics rather than
    deployment), and ``all-ones`` (keeps everything; the identity filter).
    """

    kind: str
    params: FilterParams | None = None
    pca: PCATransform | None = None
    theta_good: expfam.Parameter | None = None
    gamma: float = 0.5

    @classmethod
    def all_ones(cls) -> "FilterHandle":
        return cls(kind="all-ones")

    @classmethod
    def mlp(cls, params: FilterParams, pca: PCATransform) -> "FilterHandle":
        if params.feature_dim != pca.k:
            raise InputValidationError(
                f"scorer expects {params.feature_dim} features but the PCA yields {pca.k}"
            )
        return cls(kind="mlp", params=params, pca=pca)

    @classmethod
    def oracle_pullback(cls, theta_good: expfam.Parameter, gamma: float) -> "FilterHandle":
        # gamma = 0 would be a roundabout all-ones handle; require a real pull.
        if not 0.0 < gamma <= 1.0:
            raise InputValidationError("gamma must lie in (0, 1]")
        return cls(kind="oracle-pullback", theta_good=theta_good, gamma=gamma)

    def weights(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise InputValidationError("points must be a 2-d array")
        if self.kind == "all-ones":
            return np.ones(pts.shape[0])
        if self.kind == "oracle-pullback":
            return oracle_pullback_weights(pts, self.theta_good, self.gamma).weights
        if self.kind == "mlp":
            return forward_batch(self.params, self.pca.transform(pts))
        raise InputValidationError(f"unknown filter kind {self.kind!r}")


# ---------------------------------------------------------------------------
# Drift training data
# ---------------------------------------------------------------------------


def simulate_drift_training_data(
    model: expfam.ExpFamilyModel,
    theta_star: expfam.Parameter,
    rounds: int,
    candidates_per_round: int,
    contamination: float,
    rng: RngState,
    drift_scale: float = 1.0,
) -> tuple[list[LabeledDataset], np.ndarray]:
    """Rounds of drifting candidate sets with distance-to-truth labels.

    Each round draws a (1 - contamination) share of candidates from the
    current parameter and the rest from a mean-shifted pool (shift of
    ``drift_scale`` along the fixed direction ones/sqrt(dim)); the next
    parameter is the plain estimate over all candidates, so the shifted
    pool drags the chain a little further every round. Labels mark the
    nearest (1 - contamination) fraction to the true mean as good. Returns
    the per-round datasets and the (rounds+1, dim) trace of natural
    parameters, starting at theta_star.
    """
    if theta_star.model != model:
        raise InputValidationError("theta_star belongs to a different model")
    if not isinstance(rounds, (int, np.integer)) or rounds < 1:
        raise InputValidationError("rounds must be a positive integer")
    if candidates_per_round < 2:
        raise InputValidationError("candidates_per_round must be at least 2")
    if not 0.0 <= contamination < 1.0:
        raise InputValidationError("contamination must lie in [0, 1)")
    if drift_scale < 0.0:
        raise InputValidationError("drift_scale must be nonnegative")
    if not isinstance(rng, RngState):
        raise InputValidationError("rng must be an RngState (substreams are derived per round)")

    d = model.dim
    direction = np.ones(d) / math.sqrt(d)
    shift = drift_scale * direction
    n_bad = int(round(contamination * candidates_per_round))
    n_good = candidates_per_round - n_bad

    datasets: list[LabeledDataset] = []
    trace = np.empty((rounds + 1, d))
    current = theta_star
    trace[0] = current.theta
    for r in range(rounds):
        gen = rng.derive(r).generator()
        clean = expfam.sample(model, current, n_good, gen) if n_good else np.empty((0, d))
        if n_bad:
            shifted_mean = expfam.mean_map(model, current) + shift
            shifted = expfam.sample(
                model, expfam.inverse_mean_map(model, shifted_mean), n_bad, gen
            )
            candidates = np.vstack([clean, shifted])
        else:
            candidates = clean
        datasets.append(label_by_distance(candidates, theta_star, 1.0 - contamination))
        current = expfam.estimate(model, candidates)
        trace[r + 1] = current.theta
    return datasets, trace


def merge_datasets(datasets) -> LabeledDataset:
    """Concatenate per-round labeled datasets into one training pool."""
    datasets = list(datasets)
    if not datasets:
        raise InputValidationError("need at least one dataset")
    points = np.vstack([ds.points for ds in datasets])
    labels = np.concatenate([ds.labels for ds in datasets])
    return LabeledDataset(points, labels)


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------


def config_content_hash(meta: dict) -> str:
    """Content hash of a JSON-serializable config echo (sorted-key canonical form)."""
    canonical = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_filter_checkpoint(path, params: FilterParams, pca: PCATransform, train_meta: dict) -> None:
    """Write a versioned JSON container with the PCA, the scorer, and a config echo."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "pca": {
            "mean": pca.mean.tolist(),
            "scale": pca.scale.tolist(),
            "projection": pca.projection.tolist(),
            "explained_variance_ratio": pca.explained_variance_ratio.tolist(),
            "zero_variance": pca.zero_variance.astype(bool).tolist(),
        },
        "params": {
            "hidden_dim": params.hidden_dim,
            "feature_dim": params.feature_dim,
            "w1": params.w1.tolist(),
            "b1": params.b1.tolist(),
            "w2": params.w2.tolist(),
            "b2": params.b2,
        },
        "train_config": train_meta,
        "config_hash": config_content_hash(train_meta),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_filter_checkpoint(path) -> tuple[FilterParams, PCATransform, dict]:
    """Read a checkpoint, validating version and internal shape consistency."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise InputValidationError(f"unsupported checkpoint version {version!r}")
    try:
        raw_pca = payload["pca"]
        raw_params = payload["params"]
        pca = PCATransform(
            mean=np.asarray(raw_pca["mean"], dtype=float),
            scale=np.asarray(raw_pca["scale"], dtype=float),
            projection=np.asarray(raw_pca["projection"], dtype=float),
            explained_variance_ratio=np.asarray(raw_pca["explained_variance_ratio"], dtype=float),
            zero_variance=np.asarray(raw_pca["zero_variance"], dtype=bool),
        )
        params = FilterParams(
            w1=np.asarray(raw_params["w1"], dtype=float),
            b1=np.asarray(raw_params["b1"], dtype=float),
            w2=np.asarray(raw_params["w2"], dtype=float),
            b2=float(raw_params["b2"]),
        )
        hidden = int(raw_params["hidden_dim"])
        feat = int(raw_params["feature_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputValidationError(f"malformed checkpoint: {exc}") from exc
    if pca.projection.ndim != 2 or pca.projection.shape[0] != pca.mean.shape[0]:
        raise InputValidationError("checkpoint PCA projection does not match its mean dimension")
    if params.w1.shape != (hidden, feat):
        raise InputValidationError(
            f"checkpoint scorer shape {params.w1.shape} contradicts declared ({hidden}, {feat})"
        )
    if feat != pca.k:
        raise InputValidationError(
            f"scorer expects {feat} features but the stored PCA yields {pca.k}"
        )
    meta = dict(payload.get("train_config", {}))
    stored_hash = payload.get("config_hash")
    if stored_hash != config_content_hash(meta):
        raise InputValidationError("checkpoint config hash does not match its config echo")
    meta["config_hash"] = stored_hash
    return params, pca, meta
