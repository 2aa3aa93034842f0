"""First- and second-order solvers for the reverse diffusion SDE in log-SNR time.

The stochastic term of every step is the exact Ito integral of the linear part, so a
single standard-normal draw ``z`` per step has the right variance for any step size:

    eps form:  sigma_t * sqrt(e^{2h} - 1) * z
    x0 form:   sigma_t * sqrt(1 - e^{-2h}) * z

For the multistep solvers ``r`` is the previously visited (larger) time, so
``r1 = (lambda_r - lambda_s) / h`` is negative.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import GridError
from .ode_solvers import StepCoeffs, SolverSpec, _data_fn, _noise_fn, step_coeffs
from .schedule import NoiseSchedule


class NoiseStream:
    """Reproducible per-step normal draws from a counter-based (Philox) generator."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.Philox(key=self.seed))
        self.draws = 0

    def draw(self, shape) -> np.ndarray:
        self.draws += 1
        return self._rng.standard_normal(shape)


def _z(z, x):
    return np.zeros_like(x) if z is None else np.asarray(z, dtype=float)


def sde_1_update(x, eps, c: StepCoeffs, z) -> np.ndarray:
    h = c.h
    return (
        (c.alpha_t / c.alpha_s) * x
        - 2.0 * c.sigma_t * np.expm1(h) * eps
        + c.sigma_t * np.sqrt(np.expm1(2.0 * h)) * z
    )


def sde_pp_1_update(x, x0, c: StepCoeffs, z) -> np.ndarray:
    h = c.h
    return (
        (c.sigma_t / c.sigma_s) * np.exp(-h) * x
        - c.alpha_t * np.expm1(-2.0 * h) * x0
        + c.sigma_t * np.sqrt(-np.expm1(-2.0 * h)) * z
    )


def sde_2m_correction_coeff(c: StepCoeffs, exact: bool = False) -> float:
    """Weight of ``(eps_r - eps_s) / r1``; ``exact`` keeps ``2 (e^h - 1 - h) / h``."""
    h = c.h
    if exact:
        return 2.0 * c.sigma_t * (np.expm1(h) - h) / h
    return c.sigma_t * np.expm1(h)


def sde_pp_2m_correction_coeff(c: StepCoeffs, exact: bool = False) -> float:
    """Weight of ``(x0_r - x0_s) / r1``; ``exact`` keeps ``(e^{-2h} - 1 + 2h) / (2h)``."""
    h = c.h
    if exact:
        return c.alpha_t * (np.expm1(-2.0 * h) + 2.0 * h) / (2.0 * h)
    return -0.5 * c.alpha_t * np.expm1(-2.0 * h)


def _r1(schedule: NoiseSchedule, t_r: float, c: StepCoeffs) -> float:
    r1 = (schedule.lambda_of(t_r) - c.lambda_s) / c.h
    if r1 == 0:
        raise GridError("buffered output sits at the current time (r1 = 0)")
    return r1


def sde_2m_update(x, eps_s, eps_r, r1: float, c: StepCoeffs, z, exact: bool = False):
    return sde_1_update(x, eps_s, c, z) - sde_2m_correction_coeff(c, exact) * (eps_r - eps_s) / r1


def sde_pp_2m_update(x, x0_s, x0_r, r1: float, c: StepCoeffs, z, exact: bool = False):
    return sde_pp_1_update(x, x0_s, c, z) + sde_pp_2m_correction_coeff(c, exact) * (x0_r - x0_s) / r1


def sde_1_step(x_s, model, t_s: float, t_t: float, z, schedule: NoiseSchedule):
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    return sde_1_update(x_s, _noise_fn(model, schedule)(x_s, t_s), c, _z(z, x_s))


def sde_pp_1_step(x_s, model, t_s: float, t_t: float, z, schedule: NoiseSchedule):
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    return sde_pp_1_update(x_s, _data_fn(model, schedule)(x_s, t_s), c, _z(z, x_s))


def sde_2m_step(
    x_s, model, buffered, t_s: float, t_t: float, z, schedule: NoiseSchedule, exact: bool = False
):
    """``buffered = (t_r, eps(x_r, t_r))`` from the previous step, ``t_r > t_s``."""
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    t_r, eps_r = buffered
    r1 = _r1(schedule, t_r, c)
    eps_s = _noise_fn(model, schedule)(x_s, t_s)
    return sde_2m_update(x_s, eps_s, np.asarray(eps_r), r1, c, _z(z, x_s), exact)


def sde_pp_2m_step(
    x_s, model, buffered, t_s: float, t_t: float, z, schedule: NoiseSchedule, exact: bool = False
):
    """``buffered = (t_r, x0(x_r, t_r))`` from the previous step, ``t_r > t_s``."""
    x_s = np.asarray(x_s, dtype=float)
    c = step_coeffs(schedule, t_s, t_t)
    if c.degenerate:
        return x_s
    t_r, x0_r = buffered
    r1 = _r1(schedule, t_r, c)
    x0_s = _data_fn(model, schedule)(x_s, t_s)
    return sde_pp_2m_update(x_s, x0_s, np.asarray(x0_r), r1, c, _z(z, x_s), exact)


def run_sde(
    model,
    spec: SolverSpec,
    x: np.ndarray,
    stream: NoiseStream,
    keep: Callable[[np.ndarray], None] = lambda _: None,
    noise: Callable[[tuple], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate over ``spec.grid`` with one model evaluation and one draw per step.

    The multistep methods take a first-order step first. ``noise`` overrides the draw
    source (e.g. zeros for the deterministic skeleton).
    """
    schedule, times, method = spec.schedule, spec.grid.times, spec.method
    noise_pp = method in ("sde_pp_1", "sde_pp_2m")
    fn = _data_fn(model, schedule) if noise_pp else _noise_fn(model, schedule)
    draw = noise or stream.draw
    prev = None
    for i in range(1, spec.M + 1):
        t_s, t_t = times[i - 1], times[i]
        c = step_coeffs(schedule, t_s, t_t)
        out = fn(x, t_s)
        z = draw(x.shape)
        if prev is None or method in ("sde_1", "sde_pp_1"):
            x = sde_pp_1_update(x, out, c, z) if noise_pp else sde_1_update(x, out, c, z)
        else:
            t_r, out_r = prev
            r1 = _r1(schedule, t_r, c)
            update = sde_pp_2m_update if noise_pp else sde_2m_update
            x = update(x, out, out_r, r1, c, z, spec.exact_sde_coeffs)
        prev = (t_s, out)
        keep(x)
    return x
