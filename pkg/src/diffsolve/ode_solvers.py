"""Exponential-integrator steps for the probability-flow ODE and the sampling driver.

All steps move backwards in time, from ``t_s`` to ``t_t < t_s``, with
``h = lambda_t - lambda_s > 0``. Data-prediction steps integrate the linear part
``sigma_t / sigma_s * x`` exactly and approximate ``int e^lambda x0 dlambda``;
noise-prediction steps do the same with ``alpha_t / alpha_s`` and ``e^-lambda eps``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import GridError, SolverStateError, SpecError
from .models import CountingModel, PredictionModel, data_view, eps_to_x0, noise_view, x0_to_eps
from .schedule import NoiseSchedule, TimeGrid

_H_EPS = 1e-12

Method = Literal[
    "ddim_eta",
    "first_order_data",
    "dpm_solver_2",
    "dpm_pp_2s",
    "dpm_pp_2m",
    "sde_1",
    "sde_pp_1",
    "sde_2m",
    "sde_pp_2m",
]

ODE_METHODS = ("ddim_eta", "first_order_data", "dpm_solver_2", "dpm_pp_2s", "dpm_pp_2m")
SDE_METHODS = ("sde_1", "sde_pp_1", "sde_2m", "sde_pp_2m")
SINGLESTEP_METHODS = ("dpm_solver_2", "dpm_pp_2s")
METHOD_ORDER = {
    "ddim_eta": 1,
    "first_order_data": 1,
    "dpm_solver_2": 2,
    "dpm_pp_2s": 2,
    "dpm_pp_2m": 2,
    "sde_1": 1,
    "sde_pp_1": 1,
    "sde_2m": 2,
    "sde_pp_2m": 2,
}


@dataclass(frozen=True)
class StepCoeffs:
    alpha_s: float
    sigma_s: float
    lambda_s: float
    alpha_t: float
    sigma_t: float
    lambda_t: float

    @property
    def h(self) -> float:
        return self.lambda_t - self.lambda_s

    @property
    def degenerate(self) -> bool:
        return abs(self.h) < _H_EPS


def step_coeffs(schedule: NoiseSchedule, t_s: float, t_t: float) -> StepCoeffs:
    if t_t > t_s:
        raise GridError(f"steps run backwards in time; got t_s={t_s} < t_t={t_t}")
    return StepCoeffs(*schedule.alpha_sigma_lambda(t_s), *schedule.alpha_sigma_lambda(t_t))


def _data_fn(model, schedule):
    return data_view(model, schedule) if hasattr(model, "kind") else model


def _noise_fn(model, schedule):
    return noise_view(model, schedule) if hasattr(model, "kind") else model


def taylor_coeff(n: int, lambda_s: float, lambda_t: float) -> float:
    """``int_{lambda_s}^{lambda_t} e^lambda (lambda - lambda_s)^n / n! dlambda`` for n = 0, 1."""
    h = lambda_t - lambda_s
    if h < 0:
        raise ValueError("need lambda_t >= lambda_s")
    if n == 0:
        return float(np.exp(lambda_s) * np.expm1(h))
    if n == 1:
        return float(np.exp(lambda_t) * (h - 1.0) + np.exp(lambda_s))
    raise ValueError(f"taylor_coeff supports n in {{0, 1}}, got {n}")


# -- first order -------------------------------------------------------------------------


def first_order_data_update(x, x0, c: StepCoeffs) -> np.ndarray:
    return (c.sigma_t / c.sigma_s) * x - c.alpha_t * np.expm1(-c.h) * x0


def first_order_eps_update(x, eps, c: StepCoeffs) -> np.ndarray:
    return (c.alpha_t / c.alpha_s) * x - c.sigma_t * np.expm1(c.h) * eps


def first_order_data_step(x_s, model, t_s: float, t_t: float, schedule: NoiseSchedule):
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    return first_order_data_update(x_s, _data_fn(model, schedule)(x_s, t_s), c)


def first_order_eps_step(x_s, model, t_s: float, t_t: float, schedule: NoiseSchedule):
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    return first_order_eps_update(x_s, _noise_fn(model, schedule)(x_s, t_s), c)


def ddim_eta_step(x_s, model, t_s: float, t_t: float, eta: float, z, schedule: NoiseSchedule):
    """Generalized DDIM: ``alpha_t x0 + sqrt(sigma_t^2 - eta^2) eps + eta z``."""
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if eta < 0 or eta > c.sigma_t:
        raise ValueError(f"need 0 <= eta <= sigma_t = {c.sigma_t}, got {eta}")
    if eta > 0 and z is None:
        raise ValueError("eta > 0 needs a noise draw z")
    out = model(x_s, t_s)
    if getattr(model, "kind", "data_prediction") == "noise_prediction":
        eps, x0 = out, eps_to_x0(out, x_s, c.alpha_s, c.sigma_s)
    else:
        x0, eps = out, x0_to_eps(out, x_s, c.alpha_s, c.sigma_s)
    x_t = c.alpha_t * x0 + np.sqrt(c.sigma_t**2 - eta**2) * eps
    if eta > 0:
        x_t = x_t + eta * np.asarray(z)
    return x_t


def sde_equivalent_eta(schedule: NoiseSchedule, t_s: float, t_t: float) -> float:
    """The ``eta`` for which DDIM coincides with the first-order data SDE step."""
    c = step_coeffs(schedule, t_s, t_t)
    return c.sigma_t * float(np.sqrt(-np.expm1(-2.0 * c.h)))


# -- singlestep second order --------------------------------------------------------------


def _ratio(schedule: NoiseSchedule, t_prev: float, s: float, c: StepCoeffs) -> float:
    r = (schedule.lambda_of(s) - c.lambda_s) / c.h
    if not 0.0 < r < 1.0:
        raise GridError(f"intermediate point must satisfy t_prev > s > t (r = {r})")
    return r


def dpm_pp_2s_step(x_prev, model, t_prev: float, s: float, t: float, schedule: NoiseSchedule):
    """Singlestep second-order data-prediction step (two model evaluations)."""
    x_prev = np.asarray(x_prev, dtype=float)
    c = step_coeffs(schedule, t_prev, t)
    if c.degenerate:
        return x_prev
    r = _ratio(schedule, t_prev, s, c)
    x0_fn = _data_fn(model, schedule)
    alpha_si, sigma_si, _ = schedule.alpha_sigma_lambda(s)

    x0_prev = x0_fn(x_prev, t_prev)
    u = (sigma_si / c.sigma_s) * x_prev - alpha_si * np.expm1(-r * c.h) * x0_prev
    x0_u = x0_fn(u, s)
    D = (1.0 - 0.5 / r) * x0_prev + (0.5 / r) * x0_u
    return first_order_data_update(x_prev, D, c)


def _singlestep_eps(x_prev, model, t_prev, s, t, schedule, damped: bool):
    x_prev = np.asarray(x_prev, dtype=float)
    c = step_coeffs(schedule, t_prev, t)
    if c.degenerate:
        return x_prev
    r = _ratio(schedule, t_prev, s, c)
    eps_fn = _noise_fn(model, schedule)
    alpha_si, sigma_si, _ = schedule.alpha_sigma_lambda(s)

    eps_prev = eps_fn(x_prev, t_prev)
    u = (alpha_si / c.alpha_s) * x_prev - sigma_si * np.expm1(r * c.h) * eps_prev
    eps_u = eps_fn(u, s)
    corr = (c.sigma_t / (2.0 * r)) * np.expm1(c.h)
    if damped:
        corr *= np.exp(-r * c.h)
    return first_order_eps_update(x_prev, eps_prev, c) - corr * (eps_u - eps_prev)


def dpm_solver_2_step(x_prev, model, t_prev: float, s: float, t: float, schedule: NoiseSchedule):
    """Singlestep second-order noise-prediction step (the pre-existing baseline)."""
    return _singlestep_eps(x_prev, model, t_prev, s, t, schedule, damped=False)


def dpm_pp_2s_eps_form(x_prev, model, t_prev: float, s: float, t: float, schedule: NoiseSchedule):
    """:func:`dpm_pp_2s_step` rewritten in terms of ``eps``.

    Identical to :func:`dpm_solver_2_step` except that the correction term carries an
    extra factor ``exp(-r h)``.
    """
    return _singlestep_eps(x_prev, model, t_prev, s, t, schedule, damped=True)


# -- multistep second order ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StepState:
    """Multistep carry: current ``(t, x)`` and up to two ``(t_j, x0_j)`` model outputs."""

    t: float
    x: np.ndarray
    buffer: tuple = ()

    def __post_init__(self):
        if len(self.buffer) > 2:
            raise SolverStateError("buffer holds at most two outputs")
        if any(tj < self.t for tj, _ in self.buffer):
            raise SolverStateError("buffered outputs must not lie after the current time")


def init_multistep_state(model, x_T, t0: float, schedule: NoiseSchedule) -> StepState:
    x_T = np.asarray(x_T, dtype=float)
    return StepState(t0, x_T, ((t0, _data_fn(model, schedule)(x_T, t0)),))


def dpm_pp_2m_update(x, x0_1, x0_2, h_prev: float, c: StepCoeffs) -> np.ndarray:
    """``x0_1`` is the output at the current point, ``x0_2`` the one before it."""
    r = h_prev / c.h
    D = (1.0 + 0.5 / r) * x0_1 - (0.5 / r) * x0_2
    return first_order_data_update(x, D, c)


def dpm_pp_2m_step(
    state: StepState, model, t_i: float, schedule: NoiseSchedule, final: bool = False
) -> StepState:
    """Advance a multistep state to ``t_i`` with one new model evaluation.

    With a single buffered output the step is first order. ``final=True`` skips the
    evaluation at ``t_i``, as no later step would use it.
    """
    if not state.buffer or state.buffer[-1][0] != state.t:
        raise SolverStateError("buffer must hold the model output at the current time")
    c = step_coeffs(schedule, state.t, t_i)
    if c.degenerate:
        return state
    x0_1 = state.buffer[-1][1]
    if len(state.buffer) == 1:
        x_new = first_order_data_update(state.x, x0_1, c)
    else:
        t_2, x0_2 = state.buffer[0]
        h_prev = c.lambda_s - schedule.lambda_of(t_2)
        x_new = dpm_pp_2m_update(state.x, x0_1, x0_2, h_prev, c)
    if final:
        return StepState(t_i, x_new, ())
    new_out = _data_fn(model, schedule)(x_new, t_i)
    return StepState(t_i, x_new, (state.buffer[-1], (t_i, new_out)))


# -- driver -------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SolverSpec:
    """What to run: method, grid, and the knobs that only some methods read.

    ``eta`` is a constant or a callable ``eta(t_s, t_t)``; ``exact_sde_coeffs`` selects
    the unapproximated second-order SDE coefficients.
    """

    method: Method
    grid: TimeGrid
    schedule: NoiseSchedule
    eta: float | Callable[[float, float], float] = 0.0
    seed: int = 0
    exact_sde_coeffs: bool = False

    def __post_init__(self):
        if self.method not in ODE_METHODS + SDE_METHODS:
            raise SpecError(f"unknown method {self.method!r}")
        if self.grid.M < 1:
            raise SpecError("need at least one step")
        if self.method in SINGLESTEP_METHODS and self.grid.intermediates is None:
            raise SpecError(f"{self.method} needs a grid with intermediate points")
        lo, hi = self.schedule.t_min, self.schedule.t_max
        if self.grid.times[-1] < lo or self.grid.times[0] > hi:
            raise SpecError("grid extends outside the schedule domain")

    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def stochastic(self) -> bool:
        return self.method in SDE_METHODS or (self.method == "ddim_eta" and self._eta_nonzero)

    @property
    def _eta_nonzero(self) -> bool:
        return callable(self.eta) or self.eta > 0


@dataclass
class SampleResult:
    x: np.ndarray
    nfe: int
    trajectory: list[np.ndarray] | None = None
    wall_ms: float = 0.0


def sample(
    model: PredictionModel, spec: SolverSpec, x_T, record_trajectory: bool = False
) -> SampleResult:
    """Integrate from ``grid.times[0]`` to ``grid.times[-1]`` with ``spec.method``.

    ``x_T`` may carry leading batch axes; models are called on the whole batch.
    """
    from .sde_solvers import NoiseStream, run_sde

    start = time.perf_counter()
    x = np.array(x_T, dtype=float)
    if model.dim is not None and x.shape[-1] != model.dim:
        raise SpecError(f"x_T has dimension {x.shape[-1]}, model expects {model.dim}")
    counted = CountingModel(model)
    schedule, times = spec.schedule, spec.grid.times
    traj = [x.copy()] if record_trajectory else None
    stream = NoiseStream(spec.seed)

    def keep(x_new):
        if traj is not None:
            traj.append(np.array(x_new))

    if spec.method in SDE_METHODS:
        x = run_sde(counted, spec, x, stream, keep)
    elif spec.method == "dpm_pp_2m":
        state = init_multistep_state(counted, x, times[0], schedule)
        for i in range(1, spec.M + 1):
            state = dpm_pp_2m_step(state, counted, times[i], schedule, final=i == spec.M)
            keep(state.x)
        x = state.x
    else:
        mids = spec.grid.intermediates
        for i in range(1, spec.M + 1):
            t_s, t_t = times[i - 1], times[i]
            if spec.method == "first_order_data":
                x = first_order_data_step(x, counted, t_s, t_t, schedule)
            elif spec.method == "ddim_eta":
                eta = spec.eta(t_s, t_t) if callable(spec.eta) else float(spec.eta)
                z = stream.draw(x.shape) if eta > 0 else None
                x = ddim_eta_step(x, counted, t_s, t_t, eta, z, schedule)
            elif spec.method == "dpm_pp_2s":
                x = dpm_pp_2s_step(x, counted, t_s, mids[i - 1], t_t, schedule)
            else:
                x = dpm_solver_2_step(x, counted, t_s, mids[i - 1], t_t, schedule)
            keep(x)
    wall_ms = 1e3 * (time.perf_counter() - start)
    return SampleResult(x, counted.calls, traj, wall_ms)


def expected_nfe(method: str, M: int) -> int:
    return 2 * M if method in SINGLESTEP_METHODS else M
