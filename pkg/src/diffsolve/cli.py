"""Command-line driver: ``convergence``, ``equivalence`` and ``sde-stats``.

Each subcommand writes a CSV to ``--out``, prints one ``SUITE`` line per check and
exits with status 1 if any check fails.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .errors import SpecError
from .schedule import SCHEDULES


def _csv_list(cast):
    def parse(text: str):
        items = [cast(v) for v in text.split(",") if v.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(items)

    return parse


def _oracle(text: str) -> dict:
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep or key.strip() not in ("mu", "s0"):
            raise argparse.ArgumentTypeError(f"expected mu=<f>,s0=<f>, got {text!r}")
        out[key.strip()] = float(value)
    return out


def _add_common(p: argparse.ArgumentParser, oracle_default: str, dim_default: int) -> None:
    p.add_argument("--oracle", type=_oracle, default=_oracle(oracle_default), help="mu=<f>,s0=<f>")
    p.add_argument("--schedule", choices=sorted(SCHEDULES), default="vp_linear_beta")
    p.add_argument("--dim", type=int, default=dim_default)
    p.add_argument("--grid", choices=("uniform_t", "uniform_lambda", "power_kappa"), default="uniform_lambda")
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--no-timing", action="store_true", help="write wall_ms=0 for reproducible CSVs")
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffsolve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    conv = sub.add_parser("convergence", help="empirical order of deterministic solvers")
    _add_common(conv, "mu=1,s0=0.5", 4)
    conv.add_argument("--methods", type=_csv_list(str), default=("first_order_data", "dpm_pp_2s", "dpm_pp_2m"))
    conv.add_argument("--steps", type=_csv_list(int), default=(10, 20, 40, 80))
    conv.add_argument("--seeds", type=_csv_list(int), default=(0,))
    conv.add_argument("--tol", type=float, default=1e-10)
    conv.add_argument("--draws", type=int, default=20, help="starting points per configuration")

    eq = sub.add_parser("equivalence", help="algebraic identities between solvers")
    eq.add_argument("--out", type=Path, required=True)
    eq.add_argument("--seed", type=int, default=0)
    eq.add_argument("--configs", type=int, default=100)

    sde = sub.add_parser("sde-stats", help="end-time moments of SDE samplers")
    _add_common(sde, "mu=1,s0=0.5", 1)
    sde.add_argument("--method", required=True)
    sde.add_argument("--steps", type=int, default=200)
    sde.add_argument("--trajectories", type=int, default=10_000)
    sde.add_argument("--seeds", type=_csv_list(int), default=(0,))
    return parser


def _study(args, **kw) -> harness.StudySpec:
    return harness.StudySpec(
        mu=args.oracle.get("mu", 1.0),
        s0=args.oracle.get("s0", 0.5),
        dim=args.dim,
        schedule=args.schedule,
        grid_kind=args.grid,
        kappa=args.kappa,
        record_timing=not args.no_timing,
        out=args.out,
        **kw,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convergence":
            study = _study(args, methods=args.methods, steps=args.steps, seeds=args.seeds,
                           tol=args.tol, n_draws=args.draws)
            records = harness.run_convergence(study)
            harness.write_convergence_csv(records, args.out)
            results = harness.convergence_suites(records)
        elif args.command == "equivalence":
            results = harness.run_equivalence(args.seed, args.configs)
            harness.write_suites_csv(results, args.out)
        else:
            study = _study(args, methods=(args.method,), steps=(args.steps,), seeds=args.seeds,
                           trajectories=args.trajectories)
            records = harness.run_sde_stats(study)
            harness.write_sde_csv(records, args.out)
            results = harness.sde_suites(records)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for line in harness.summary_lines(results):
        print(line)
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
