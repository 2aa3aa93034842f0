"""Convergence studies, algebraic equivalence suites and SDE moment tests on the oracle.

Every study returns plain records; :func:`write_convergence_csv` and friends serialize
them, and :func:`summary_lines` renders one ``SUITE <name> PASS|FAIL max_dev=<e>`` line
per check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import SpecError, StiffnessError
from .ode_solvers import (
    METHOD_ORDER,
    ODE_METHODS,
    SDE_METHODS,
    SINGLESTEP_METHODS,
    SolverSpec,
    ddim_eta_step,
    dpm_pp_2s_eps_form,
    dpm_pp_2s_step,
    first_order_data_step,
    sample,
    sde_equivalent_eta,
)
from .oracle import GaussianOracle, reference_solve
from .schedule import discrete_interpolation, ddpm_linear_betas, get_schedule, make_time_grid, vp_cosine, vp_linear_beta
from .sde_solvers import sde_pp_1_step

CSV_HEADER = ("method", "M", "nfe", "error_l2_per_dim", "fitted_order", "wall_ms", "seed")
SDE_CSV_HEADER = (
    "method", "M", "nfe", "trajectories", "seed",
    "mean_offset", "std", "target_std", "z_mean", "z_std", "wall_ms",
)
ORDER_BANDS = {1: (0.8, 1.2), 2: (1.7, 2.3)}
EQUIVALENCE_THRESHOLDS = {
    "first_order_vs_ddim": 1e-12,
    "sde_pp_1_vs_stochastic_ddim": 1e-12,
    "dpm_pp_2s_eps_rewrite": 1e-10,
}
Z_LIMIT = 3.0


@dataclass(frozen=True)
class StudySpec:
    mu: float = 1.0
    s0: float = 0.5
    dim: int = 4
    schedule: str = "vp_linear_beta"
    methods: tuple[str, ...] = ("first_order_data", "dpm_pp_2s", "dpm_pp_2m")
    steps: tuple[int, ...] = (10, 20, 40, 80)
    seeds: tuple[int, ...] = (0,)
    tol: float = 1e-10
    n_draws: int = 20
    trajectories: int = 10_000
    grid_kind: str = "uniform_lambda"
    kappa: float = 1.0
    record_timing: bool = True
    out: Path | None = None

    def __post_init__(self):
        if not self.methods:
            raise SpecError("method list is empty")
        if not self.steps:
            raise SpecError("step list is empty")
        if not self.seeds:
            raise SpecError("seed list is empty")
        if any(int(m) != m or m < 1 for m in self.steps):
            raise SpecError(f"step counts must be positive integers: {self.steps}")
        unknown = set(self.methods) - set(ODE_METHODS + SDE_METHODS)
        if unknown:
            raise SpecError(f"unknown methods: {sorted(unknown)}")

    def oracle(self) -> GaussianOracle:
        return GaussianOracle.isotropic(self.mu, self.s0, self.dim)

    def solver_spec(self, method: str, M: int, schedule, seed: int = 0) -> SolverSpec:
        grid = make_time_grid(
            schedule, M, self.grid_kind, self.kappa, with_intermediates=method in SINGLESTEP_METHODS
        )
        return SolverSpec(method, grid, schedule, seed=seed)


@dataclass
class RunRecord:
    method: str
    M: int
    nfe: int
    error_l2_per_dim: float
    fitted_order: float = math.nan
    wall_ms: float = 0.0
    seed: int = 0

    def row(self) -> list[str]:
        return [
            self.method,
            str(self.M),
            str(self.nfe),
            f"{self.error_l2_per_dim:.10e}",
            f"{self.fitted_order:.6f}",
            f"{self.wall_ms:.3f}",
            str(self.seed),
        ]


@dataclass
class SdeStatsRecord:
    method: str
    M: int
    nfe: int
    trajectories: int
    seed: int
    mean_offset: float
    std: float
    target_std: float
    z_mean: float
    z_std: float
    wall_ms: float = 0.0

    @property
    def passed(self) -> bool:
        return abs(self.z_mean) < Z_LIMIT and abs(self.z_std) < Z_LIMIT

    def row(self) -> list[str]:
        return [
            self.method, str(self.M), str(self.nfe), str(self.trajectories), str(self.seed),
            f"{self.mean_offset:.10e}", f"{self.std:.10e}", f"{self.target_std:.10e}",
            f"{self.z_mean:.6f}", f"{self.z_std:.6f}", f"{self.wall_ms:.3f}",
        ]


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_dev: float
    threshold: float = math.nan
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"SUITE {self.name} {'PASS' if self.passed else 'FAIL'} max_dev={self.max_dev:.3e}"


def summary_lines(results: Sequence[SuiteResult]) -> list[str]:
    return [r.line() for r in results]


# -- convergence ------------------------------------------------------------------------------


def fit_order(steps: Sequence[int], errors: Sequence[float]) -> float:
    """Least-squares slope of ``-log2(error)`` against ``log2(M)``."""
    steps, errors = np.asarray(steps, dtype=float), np.asarray(errors, dtype=float)
    if steps.size < 2 or np.any(errors <= 0):
        return math.nan
    slope = np.polyfit(np.log2(steps), np.log2(errors), 1)[0]
    return float(-slope)


def run_convergence(study: StudySpec) -> list[RunRecord]:
    """Endpoint error against the reference solution for every (method, M, seed)."""
    stochastic = [m for m in study.methods if m in SDE_METHODS]
    if stochastic:
        raise SpecError(f"convergence studies take deterministic methods only: {stochastic}")
    schedule = get_schedule(study.schedule)
    oracle = study.oracle()
    model = oracle.data_model(schedule)

    records = []
    for seed in study.seeds:
        x_T = oracle.sample_marginal(schedule, schedule.t_max, study.n_draws, np.random.default_rng(seed))
        try:
            ref = reference_solve(model, schedule, x_T, study.tol)
        except StiffnessError as exc:
            raise StiffnessError(f"reference solve failed for seed {seed}: {exc}") from exc
        for method in study.methods:
            group = []
            for M in study.steps:
                res = sample(model, study.solver_spec(method, M, schedule, seed), x_T)
                err = np.linalg.norm(res.x - ref.x_end, axis=-1) / math.sqrt(study.dim)
                wall = res.wall_ms if study.record_timing else 0.0
                group.append(RunRecord(method, int(M), res.nfe, float(err.mean()), wall_ms=wall, seed=seed))
            order = fit_order([r.M for r in group], [r.error_l2_per_dim for r in group])
            for r in group:
                r.fitted_order = order
            records.extend(group)
    records.sort(key=lambda r: (r.method, r.M, r.seed))
    return records


def convergence_suites(records: Sequence[RunRecord]) -> list[SuiteResult]:
    """One suite per method: every fitted order inside the band for its nominal order."""
    out = []
    for method in sorted({r.method for r in records}):
        nominal = METHOD_ORDER[method]
        lo, hi = ORDER_BANDS[nominal]
        orders = sorted({r.fitted_order for r in records if r.method == method})
        dev = max(abs(o - nominal) if not math.isnan(o) else math.inf for o in orders)
        passed = all(lo <= o <= hi for o in orders)
        out.append(SuiteResult(f"convergence:{method}", passed, dev, hi - nominal, {"orders": orders}))
    return out


def write_convergence_csv(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(r.row())


# -- equivalence ------------------------------------------------------------------------------

DEFAULT_IMPL: dict[str, Callable] = {
    "first_order_data_step": first_order_data_step,
    "ddim_eta_step": ddim_eta_step,
    "sde_pp_1_step": sde_pp_1_step,
    "dpm_pp_2s_step": dpm_pp_2s_step,
    "dpm_pp_2s_eps_form": dpm_pp_2s_eps_form,
}


def _random_schedules():
    return [vp_linear_beta(), vp_cosine(), discrete_interpolation(ddpm_linear_betas())]


def _random_config(rng, schedules, dim=4, intermediate=False):
    schedule = schedules[rng.integers(len(schedules))]
    t_a, t_b = np.sort(rng.uniform(schedule.t_min, schedule.t_max, size=2))[::-1]
    oracle = GaussianOracle(rng.normal(0.0, 1.0, dim), float(rng.uniform(0.2, 2.0)))
    x, _ = oracle.marginal(schedule, t_a)
    x = x + oracle.marginal(schedule, t_a)[1] * rng.standard_normal(dim)
    s = float(rng.uniform(t_b, t_a)) if intermediate else None
    return schedule, oracle, float(t_a), float(t_b), s, x


def run_equivalence(
    seed: int = 0, n_configs: int = 100, impl: dict[str, Callable] | None = None
) -> list[SuiteResult]:
    """Three algebraic identities over random (schedule, step, input) configurations.

    ``impl`` replaces any of the functions in :data:`DEFAULT_IMPL` (e.g. a deliberately
    perturbed step used as a negative control).
    """
    fns = {**DEFAULT_IMPL, **(impl or {})}
    rng = np.random.default_rng(seed)
    schedules = _random_schedules()
    devs = {name: 0.0 for name in EQUIVALENCE_THRESHOLDS}

    for _ in range(n_configs):
        schedule, oracle, t_s, t_t, _, x = _random_config(rng, schedules)
        model = oracle.data_model(schedule)
        a = fns["first_order_data_step"](x, model, t_s, t_t, schedule)
        b = fns["ddim_eta_step"](x, model, t_s, t_t, 0.0, None, schedule)
        devs["first_order_vs_ddim"] = max(devs["first_order_vs_ddim"], float(np.max(np.abs(a - b))))

    for _ in range(n_configs):
        schedule, oracle, t_s, t_t, _, x = _random_config(rng, schedules)
        model = oracle.data_model(schedule)
        z = rng.standard_normal(x.shape)
        eta = sde_equivalent_eta(schedule, t_s, t_t)
        a = fns["sde_pp_1_step"](x, model, t_s, t_t, z, schedule)
        b = fns["ddim_eta_step"](x, model, t_s, t_t, eta, z, schedule)
        key = "sde_pp_1_vs_stochastic_ddim"
        devs[key] = max(devs[key], float(np.max(np.abs(a - b))))

    for _ in range(n_configs):
        schedule, oracle, t_prev, t, s, x = _random_config(rng, schedules, intermediate=True)
        a = fns["dpm_pp_2s_step"](x, oracle.data_model(schedule), t_prev, s, t, schedule)
        b = fns["dpm_pp_2s_eps_form"](x, oracle.noise_model(schedule), t_prev, s, t, schedule)
        key = "dpm_pp_2s_eps_rewrite"
        devs[key] = max(devs[key], float(np.max(np.abs(a - b))))

    return [
        SuiteResult(name, devs[name] < thr, devs[name], thr)
        for name, thr in EQUIVALENCE_THRESHOLDS.items()
    ]


def write_suites_csv(results: Sequence[SuiteResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("suite", "status", "max_dev", "threshold"))
        for r in results:
            writer.writerow((r.name, "PASS" if r.passed else "FAIL", f"{r.max_dev:.6e}", f"{r.threshold:.1e}"))


# -- SDE moments ------------------------------------------------------------------------------


def run_sde_stats(study: StudySpec, noise: Callable | None = None) -> list[SdeStatsRecord]:
    """Sample moments at the end time versus the analytic Gaussian marginal.

    Starting points are drawn from the exact marginal at ``t_max``. Components are
    centred on their own target means and pooled, so ``z_mean`` and ``z_std`` are the
    standardized deviations of the pooled mean and standard deviation.
    """
    from .sde_solvers import NoiseStream, run_sde
    import time

    deterministic = [m for m in study.methods if m not in SDE_METHODS]
    if deterministic:
        raise SpecError(f"SDE statistics need stochastic methods: {deterministic}")
    schedule = get_schedule(study.schedule)
    oracle = study.oracle()
    model = oracle.data_model(schedule)
    target_mean, target_std = oracle.marginal(schedule, schedule.t_min)

    records = []
    for method in study.methods:
        for M in study.steps:
            for seed in study.seeds:
                x_T = oracle.sample_marginal(
                    schedule, schedule.t_max, study.trajectories, np.random.default_rng([seed, 1])
                )
                spec = study.solver_spec(method, M, schedule, seed)
                start = time.perf_counter()
                x = run_sde(model, spec, x_T, NoiseStream(seed), noise=noise)
                wall = 1e3 * (time.perf_counter() - start) if study.record_timing else 0.0
                centred = (x - target_mean).ravel()
                n = centred.size
                mean_offset = float(centred.mean())
                std = float(np.sqrt(np.mean((centred - mean_offset) ** 2) * n / (n - 1)))
                z_mean = mean_offset / (target_std / math.sqrt(n))
                z_std = (std - target_std) / (target_std / math.sqrt(2 * (n - 1)))
                records.append(
                    SdeStatsRecord(method, int(M), int(M), study.trajectories, seed,
                                   mean_offset, std, target_std, z_mean, z_std, wall)
                )
    return records


def sde_suites(records: Sequence[SdeStatsRecord]) -> list[SuiteResult]:
    out = []
    for method in sorted({r.method for r in records}):
        rs = [r for r in records if r.method == method]
        dev = max(max(abs(r.z_mean), abs(r.z_std)) for r in rs)
        out.append(SuiteResult(f"sde_stats:{method}", all(r.passed for r in rs), dev, Z_LIMIT))
    return out


def write_sde_csv(records: Sequence[SdeStatsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SDE_CSV_HEADER)
        for r in records:
            writer.writerow(r.row())
