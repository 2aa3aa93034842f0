"""Prediction-model contract, parameterization conversions, guidance and thresholding.

A :class:`PredictionModel` wraps a callable ``fn(x, t) -> array`` and records whether it
predicts the noise (``eps``) or the clean data (``x0``). The two views are related by::

    x0 = (x - sigma_t * eps) / alpha_t

Guided and thresholded models are again ``PredictionModel`` instances, so the solvers
never need to know how a model was built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import SingularityError
from .schedule import NoiseSchedule

ModelKind = Literal["noise_prediction", "data_prediction"]
ModelFn = Callable[[np.ndarray, float], np.ndarray]


def eps_to_x0(eps, x, alpha: float, sigma: float) -> np.ndarray:
    if alpha == 0:
        raise SingularityError("alpha = 0: data prediction undefined")
    return (np.asarray(x) - sigma * np.asarray(eps)) / alpha


def x0_to_eps(x0, x, alpha: float, sigma: float) -> np.ndarray:
    if sigma == 0:
        raise SingularityError("sigma = 0: noise prediction undefined")
    return (np.asarray(x) - alpha * np.asarray(x0)) / sigma


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def classifier_free_combine(eps_cond, eps_uncond, s: float) -> np.ndarray:
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    _same_shape(eps_cond, eps_uncond)
    return s * eps_cond + (1.0 - s) * eps_uncond


def classifier_guide(eps, grad_logp, s: float, sigma: float) -> np.ndarray:
    eps, grad_logp = np.asarray(eps), np.asarray(grad_logp)
    _same_shape(eps, grad_logp)
    return eps - s * sigma * grad_logp


@dataclass(frozen=True)
class ThresholdSpec:
    """``static_clip`` clamps to ``[-bound, bound]``; ``dynamic`` rescales by a percentile."""

    mode: Literal["none", "static_clip", "dynamic"] = "none"
    bound: float = 1.0
    percentile: float = 0.995

    def __post_init__(self):
        if self.mode not in ("none", "static_clip", "dynamic"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if not 0.0 < self.percentile <= 1.0:
            raise ValueError("percentile must lie in (0, 1]")


def threshold_x0(x0, spec: ThresholdSpec) -> np.ndarray:
    """Clip a data prediction into ``[-bound, bound]``.

    The dynamic mode works per sample along the last axis: with ``q`` the
    ``percentile`` quantile of ``|x0|`` (linear interpolation between order
    statistics) and ``s = max(bound, q)``, it returns ``clip(x0, -s, s) * bound / s``.
    """
    x0 = np.asarray(x0, dtype=float)
    if spec.mode == "none":
        return x0
    if spec.mode == "static_clip":
        return np.clip(x0, -spec.bound, spec.bound)
    q = np.percentile(np.abs(x0), 100.0 * spec.percentile, axis=-1, keepdims=True)
    s = np.maximum(spec.bound, q)
    # the rescale can round one ulp past the bound
    return np.clip(np.clip(x0, -s, s) * (spec.bound / s), -spec.bound, spec.bound)


@dataclass(frozen=True)
class PredictionModel:
    kind: ModelKind
    fn: ModelFn
    dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("noise_prediction", "data_prediction"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    def __call__(self, x, t: float) -> np.ndarray:
        return np.asarray(self.fn(x, t), dtype=float)


def data_view(model: PredictionModel, schedule: NoiseSchedule) -> ModelFn:
    """``x0(x, t)`` regardless of the model's native parameterization."""
    if model.kind == "data_prediction":
        return model

    def x0_fn(x, t):
        alpha, sigma, _ = schedule.alpha_sigma_lambda(t)
        return eps_to_x0(model(x, t), x, alpha, sigma)

    return x0_fn


def noise_view(model: PredictionModel, schedule: NoiseSchedule) -> ModelFn:
    """``eps(x, t)`` regardless of the model's native parameterization."""
    if model.kind == "noise_prediction":
        return model

    def eps_fn(x, t):
        alpha, sigma, _ = schedule.alpha_sigma_lambda(t)
        return x0_to_eps(model(x, t), x, alpha, sigma)

    return eps_fn


def as_data_prediction(model: PredictionModel, schedule: NoiseSchedule) -> PredictionModel:
    return PredictionModel("data_prediction", data_view(model, schedule), model.dim)


def as_noise_prediction(model: PredictionModel, schedule: NoiseSchedule) -> PredictionModel:
    return PredictionModel("noise_prediction", noise_view(model, schedule), model.dim)


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance configuration.

    ``classifier_free`` needs ``conditional`` and ``unconditional`` noise models;
    ``classifier`` needs ``unconditional`` plus ``grad_log_prob(x, t)``.
    """

    mode: Literal["none", "classifier_free", "classifier"] = "none"
    scale: float = 1.0
    conditional: PredictionModel | None = None
    unconditional: PredictionModel | None = None
    grad_log_prob: ModelFn | None = None

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.scale}")
        if self.mode == "classifier_free" and (self.conditional is None or self.unconditional is None):
            raise ValueError("classifier-free guidance needs conditional and unconditional models")
        if self.mode == "classifier" and (self.unconditional is None or self.grad_log_prob is None):
            raise ValueError("classifier guidance needs an unconditional model and a gradient")
        if self.mode == "none" and self.unconditional is None:
            raise ValueError("unguided sampling still needs a model (pass it as unconditional)")


def guided_model(spec: GuidanceSpec, schedule: NoiseSchedule) -> PredictionModel:
    """Noise-prediction model with guidance folded in."""
    dim = spec.unconditional.dim
    if spec.mode == "none":
        return as_noise_prediction(spec.unconditional, schedule)

    eps_u = noise_view(spec.unconditional, schedule)
    if spec.mode == "classifier_free":
        if spec.conditional.dim is not None and dim is not None and spec.conditional.dim != dim:
            raise ValueError("conditional and unconditional models disagree on dimension")
        eps_c = noise_view(spec.conditional, schedule)

        def fn(x, t):
            return classifier_free_combine(eps_c(x, t), eps_u(x, t), spec.scale)

    else:
        grad = spec.grad_log_prob

        def fn(x, t):
            _, sigma, _ = schedule.alpha_sigma_lambda(t)
            return classifier_guide(eps_u(x, t), np.asarray(grad(x, t)), spec.scale, sigma)

    return PredictionModel("noise_prediction", fn, dim)


def thresholded_model(
    model: PredictionModel, schedule: NoiseSchedule, spec: ThresholdSpec
) -> PredictionModel:
    """Data-prediction model whose output passes through :func:`threshold_x0`.

    Guidance, if any, must already be part of ``model``; the clip acts on the
    combined data prediction.
    """
    x0 = data_view(model, schedule)
    if spec.mode == "none":
        return PredictionModel("data_prediction", x0, model.dim)
    return PredictionModel("data_prediction", lambda x, t: threshold_x0(x0(x, t), spec), model.dim)


@dataclass
class CountingModel:
    """Pass-through wrapper that counts calls (one call = one function evaluation)."""

    model: PredictionModel
    calls: int = field(default=0)

    @property
    def kind(self) -> ModelKind:
        return self.model.kind

    @property
    def dim(self) -> int | None:
        return self.model.dim

    def __call__(self, x, t):
        self.calls += 1
        return self.model(x, t)
