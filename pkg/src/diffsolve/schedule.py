"""Variance-preserving noise schedules, the log-SNR change of variables and time grids.

Every schedule is parameterized through ``log_alpha(t)``; the rest follows from the
VP constraint ``alpha**2 + sigma**2 = 1``::

    sigma_t  = sqrt(1 - alpha_t**2)
    lambda_t = log(alpha_t) - log(sigma_t)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, GridError, ScheduleError

ScheduleKind = Literal["vp_linear_beta", "vp_cosine", "vp_discrete_interp"]
GridKind = Literal["uniform_t", "uniform_lambda", "power_kappa"]

_LAMBDA_SLACK = 1e-12


def _log_alpha_from_lambda(lam):
    # alpha^2 = sigmoid(2 lambda)
    return -0.5 * np.logaddexp(0.0, -2.0 * np.asarray(lam, dtype=float))


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable VP noise schedule on ``[t_min, t_max]``.

    Build instances with :func:`vp_linear_beta`, :func:`vp_cosine` or
    :func:`discrete_interpolation` rather than directly.
    """

    kind: ScheduleKind
    params: tuple
    t_min: float = 1e-3
    t_max: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max:
            raise ScheduleError(f"need 0 < t_min < t_max, got [{self.t_min}, {self.t_max}]")

    # -- discrete-interpolation tables ---------------------------------------------------

    @cached_property
    def _nodes(self) -> tuple[np.ndarray, np.ndarray]:
        total_time, log_alphas = self.params
        log_alphas = np.asarray(log_alphas, dtype=float)
        n = len(log_alphas)
        t_nodes = np.arange(1, n + 1, dtype=float) * (total_time / n)
        return t_nodes, log_alphas

    # -- core maps -----------------------------------------------------------------------

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t < self.t_min) or np.any(t > self.t_max):
            raise DomainError(f"t outside [{self.t_min}, {self.t_max}]: {t}")
        return t

    def _log_alpha(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "vp_linear_beta":
            beta_min, beta_max = self.params
            return -0.25 * t**2 * (beta_max - beta_min) - 0.5 * t * beta_min
        if self.kind == "vp_cosine":
            (s,) = self.params
            phi = 0.5 * math.pi * (t + s) / (1.0 + s)
            return np.log(np.cos(phi)) - math.log(math.cos(0.5 * math.pi * s / (1.0 + s)))
        if self.kind == "vp_discrete_interp":
            t_nodes, log_alphas = self._nodes
            return np.interp(t, t_nodes, log_alphas)
        raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    def log_alpha(self, t):
        return self._log_alpha(self._check_t(t))

    def alpha_sigma_lambda(self, t):
        """Return ``(alpha_t, sigma_t, lambda_t)``; scalars in, floats out."""
        t = self._check_t(t)
        log_alpha = self._log_alpha(t)
        log_sigma = 0.5 * np.log(-np.expm1(2.0 * log_alpha))
        out = np.exp(log_alpha), np.exp(log_sigma), log_alpha - log_sigma
        if t.ndim == 0:
            return tuple(float(v) for v in out)
        return out

    def lambda_of(self, t):
        return self.alpha_sigma_lambda(t)[2]

    @property
    def lambda_range(self) -> tuple[float, float]:
        """``(lambda(t_max), lambda(t_min))``, i.e. (smallest, largest)."""
        return self.lambda_of(self.t_max), self.lambda_of(self.t_min)

    def inverse_lambda(self, lam):
        lam_arr = np.asarray(lam, dtype=float)
        lo, hi = self.lambda_range
        if (
            np.any(~np.isfinite(lam_arr))
            or np.any(lam_arr < lo - _LAMBDA_SLACK)
            or np.any(lam_arr > hi + _LAMBDA_SLACK)
        ):
            raise DomainError(f"lambda outside [{lo}, {hi}]: {lam}")
        lam_arr = np.clip(lam_arr, lo, hi)
        log_alpha = _log_alpha_from_lambda(lam_arr)

        if self.kind == "vp_linear_beta":
            beta_min, beta_max = self.params
            # a t^2 + b t + log_alpha = 0 in the cancellation-free root form
            a, b = 0.25 * (beta_max - beta_min), 0.5 * beta_min
            t = -2.0 * log_alpha / (b + np.sqrt(b * b - 4.0 * a * log_alpha))
        elif self.kind == "vp_cosine":
            (s,) = self.params
            log_cos0 = math.log(math.cos(0.5 * math.pi * s / (1.0 + s)))
            t = 2.0 * (1.0 + s) / math.pi * np.arccos(np.exp(log_alpha + log_cos0)) - s
        else:
            t = np.vectorize(self._bisect_lambda, otypes=[float])(lam_arr)
        t = np.clip(t, self.t_min, self.t_max)
        return float(t) if t.ndim == 0 else t

    def _bisect_lambda(self, lam: float) -> float:
        lo, hi = self.lambda_range
        if lam >= hi:
            return self.t_min
        if lam <= lo:
            return self.t_max
        return brentq(
            lambda t: self.lambda_of(t) - lam, self.t_min, self.t_max, xtol=1e-15, rtol=1e-15
        )

    # -- SDE coefficients ------------------------------------------------------------------

    def f(self, t):
        """Drift coefficient ``d log(alpha_t) / dt``."""
        t = self._check_t(t)
        if self.kind == "vp_linear_beta":
            beta_min, beta_max = self.params
            out = -0.5 * t * (beta_max - beta_min) - 0.5 * beta_min
        elif self.kind == "vp_cosine":
            (s,) = self.params
            phi = 0.5 * math.pi * (t + s) / (1.0 + s)
            out = -np.tan(phi) * 0.5 * math.pi / (1.0 + s)
        else:
            t_nodes, log_alphas = self._nodes
            idx = np.clip(np.searchsorted(t_nodes, t, side="right") - 1, 0, len(t_nodes) - 2)
            out = (log_alphas[idx + 1] - log_alphas[idx]) / (t_nodes[idx + 1] - t_nodes[idx])
        return float(out) if np.ndim(out) == 0 else out

    def g2(self, t):
        """Squared diffusion ``d sigma^2/dt - 2 f sigma^2``, which is ``-2 f`` under VP."""
        return -2.0 * self.f(t)

    def dlambda_dt(self, t):
        _, sigma, _ = self.alpha_sigma_lambda(t)
        return self.f(t) / sigma**2


def vp_linear_beta(
    beta_min: float = 0.1, beta_max: float = 20.0, t_min: float = 1e-3, t_max: float = 1.0
) -> NoiseSchedule:
    if beta_min < 0 or beta_max < beta_min or beta_max <= 0:
        raise ScheduleError(f"invalid linear beta range ({beta_min}, {beta_max})")
    return NoiseSchedule("vp_linear_beta", (float(beta_min), float(beta_max)), t_min, t_max)


def vp_cosine(s: float = 0.008, t_min: float = 1e-3, t_max: float = 0.9946) -> NoiseSchedule:
    # alpha vanishes at t = 1, so the default end point stays just short of it
    if t_max >= 1.0:
        raise ScheduleError("cosine schedule needs t_max < 1 (alpha_1 = 0)")
    return NoiseSchedule("vp_cosine", (float(s),), t_min, t_max)


def discrete_interpolation(betas, total_time: float = 1.0) -> NoiseSchedule:
    """Continuous schedule from a discrete DDPM ``beta`` sequence.

    Node ``n`` (1-based) sits at ``t_n = n * total_time / N`` with
    ``log alpha_n = 0.5 * sum_{i<=n} log(1 - beta_i)`` (``alpha_n**2`` is the cumulative
    product). ``log alpha`` is linear between nodes; the domain is ``[t_1, t_N]``.
    """
    betas = np.asarray(betas, dtype=float)
    if betas.ndim != 1 or betas.size < 2:
        raise ScheduleError("need a 1-d sequence of at least 2 betas")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ScheduleError("all betas must lie in (0, 1)")
    log_alphas = 0.5 * np.cumsum(np.log1p(-betas))
    n = betas.size
    sched = NoiseSchedule(
        "vp_discrete_interp",
        (float(total_time), tuple(log_alphas.tolist())),
        t_min=total_time / n,
        t_max=float(total_time),
    )
    t_nodes, _ = sched._nodes
    lam = sched.lambda_of(t_nodes)
    if not np.all(np.diff(lam) < 0):
        raise ScheduleError("interpolated log-SNR is not strictly decreasing")
    return sched


def ddpm_linear_betas(n: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> np.ndarray:
    return np.linspace(beta_start, beta_end, n)


SCHEDULES = {
    "vp_linear_beta": vp_linear_beta,
    "vp_cosine": vp_cosine,
    "vp_discrete_interp": lambda: discrete_interpolation(ddpm_linear_betas()),
}


def get_schedule(name: str) -> NoiseSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ScheduleError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


def alpha_sigma_lambda(schedule: NoiseSchedule, t):
    return schedule.alpha_sigma_lambda(t)


def inverse_lambda(schedule: NoiseSchedule, lam):
    return schedule.inverse_lambda(lam)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Decreasing times ``t_0 = t_max > ... > t_M = t_min``.

    ``intermediates[i-1]`` is the singlestep point ``s_i`` with ``t_{i-1} > s_i > t_i``.
    """

    times: np.ndarray
    intermediates: np.ndarray | None = None
    kind: str = "uniform_t"
    kappa: float = 1.0

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise GridError("a grid needs at least two times")
        if not np.all(np.diff(times) < 0):
            raise GridError("grid times must be strictly decreasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        if self.intermediates is not None:
            mids = np.array(self.intermediates, dtype=float)
            if mids.shape != (times.size - 1,):
                raise GridError("need exactly one intermediate per interval")
            if not (np.all(mids < times[:-1]) and np.all(mids > times[1:])):
                raise GridError("intermediates must satisfy t_{i-1} > s_i > t_i")
            mids.setflags(write=False)
            object.__setattr__(self, "intermediates", mids)

    @property
    def M(self) -> int:
        return self.times.size - 1


def make_time_grid(
    schedule: NoiseSchedule,
    M: int,
    kind: GridKind = "uniform_t",
    kappa: float = 1.0,
    with_intermediates: bool = False,
    intermediate: Literal["t_mid", "lambda_mid"] = "t_mid",
    t_start: float | None = None,
    t_end: float | None = None,
) -> TimeGrid:
    """Time steps from ``t_start`` (default ``t_max``) down to ``t_end`` (default ``t_min``).

    ``power_kappa`` spaces ``t**(1/kappa)`` uniformly; ``kappa = 1`` is ``uniform_t``.
    ``uniform_lambda`` spaces the log-SNR uniformly and maps back through
    :meth:`NoiseSchedule.inverse_lambda`.
    """
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M}")
    M = int(M)
    t0 = schedule.t_max if t_start is None else float(t_start)
    tM = schedule.t_min if t_end is None else float(t_end)
    if not schedule.t_min <= tM < t0 <= schedule.t_max:
        raise DomainError(f"grid end points [{tM}, {t0}] outside the schedule domain")

    frac = np.arange(M + 1) / M
    if kind == "uniform_t":
        times = (1.0 - frac) * t0 + frac * tM
    elif kind == "power_kappa":
        if kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {kappa}")
        times = ((1.0 - frac) * t0 ** (1.0 / kappa) + frac * tM ** (1.0 / kappa)) ** kappa
    elif kind == "uniform_lambda":
        lam0, lamM = schedule.lambda_of(t0), schedule.lambda_of(tM)
        times = np.asarray(schedule.inverse_lambda((1.0 - frac) * lam0 + frac * lamM), dtype=float)
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    times = np.array(times, dtype=float)
    times[0], times[-1] = t0, tM

    mids = None
    if with_intermediates:
        if intermediate == "t_mid":
            mids = 0.5 * (times[:-1] + times[1:])
        elif intermediate == "lambda_mid":
            lam = schedule.lambda_of(times)
            mids = np.asarray(schedule.inverse_lambda(0.5 * (lam[:-1] + lam[1:])), dtype=float)
        else:
            raise ValueError(f"unknown intermediate placement {intermediate!r}")
    return TimeGrid(times, mids, kind, float(kappa))
