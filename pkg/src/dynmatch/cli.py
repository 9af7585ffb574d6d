"""Command-line entry point.

Subcommands: ``simulate`` (one policy at one grid point), ``solve``
(truncated stationary solver), ``theory`` (closed-form constants and
bounds), ``experiment <name>`` (a named scenario), and ``couple``
(pathwise-dominance verification of the coupled simulations).  Tabular
results use the experiment CSV schema, printed to stdout and — with
``--out`` — written to a file.

Exit codes: 0 success, 2 configuration or parameter error, 3 numeric or
convergence failure (including a coupling dominance violation), 4 I/O
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from .core import (
    BoundConditionError,
    ConvergenceError,
    MarketParams,
    ParamError,
    PolicyKind,
    RunControls,
    SearchBudgetError,
    TruncationError,
    regime,
)
from .counts import run_coupled_bilateral_e, run_coupled_chain, run_replica
from .experiments import (
    EXPERIMENT_NAMES,
    ResultRow,
    _CSV_FIELDS,
    _ctmc_row,
    _format_cell,
    _theory_w_h,
    default_spec,
    emit_csv,
    load_config,
    run_experiment,
)
from .graphsim import run_graph_replica
from .theory import (
    LimitResult,
    bound_chain,
    bounds_bilateral_e,
    chain_length_limit,
    critical_ratio,
    heuristic_chain_constant,
    limit_bilateral_h,
)

__all__ = ["main"]

_QUICK_DIVISOR = 20
_QUICK_FLOOR = 400

_SIM_DEFAULT_ARRIVALS = 100_000
_COUPLE_DEFAULT_ARRIVALS = 100_000


def _row_lines(rows: Sequence[ResultRow]) -> List[str]:
    """Render rows exactly as :func:`emit_csv` would, for stdout."""
    lines = [",".join(_CSV_FIELDS)]
    for row in rows:
        lines.append(
            ",".join(_format_cell(getattr(row, name)) for name in _CSV_FIELDS)
        )
    return lines


def _emit(rows: Sequence[ResultRow], out: Optional[str]) -> None:
    for line in _row_lines(rows):
        print(line)
    if out is not None:
        emit_csv(rows, out)


def _write_text(lines: Sequence[str], out: Optional[str]) -> None:
    for line in lines:
        print(line)
    if out is not None:
        with open(out, "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")


def _market_params(args: argparse.Namespace) -> MarketParams:
    return MarketParams(
        lambda_h=args.lambda_h,
        lambda_e=args.lambda_e,
        p_h=args.p_h,
        p_e=args.p_e,
        d=args.d,
    )


def _controls(args: argparse.Namespace, default_arrivals: int) -> RunControls:
    arrivals = args.arrivals if args.arrivals is not None else default_arrivals
    if args.quick:
        arrivals = max(_QUICK_FLOOR, arrivals // _QUICK_DIVISOR)
    seed = args.seed if args.seed is not None else 0
    return RunControls(arrivals=arrivals, seed=seed)


def _cmd_simulate(args: argparse.Namespace) -> int:
    policy = PolicyKind(args.policy)
    p = _market_params(args)
    rc = _controls(args, _SIM_DEFAULT_ARRIVALS)
    if args.engine == "graph":
        summary = run_graph_replica(policy, p, rc).summary
    else:
        summary = run_replica(policy, p, rc)
    row = ResultRow(
        experiment="simulate",
        policy=policy.value,
        lambda_h=p.lambda_h,
        lambda_e=p.lambda_e,
        p_h=p.p_h,
        p_e=p.p_e,
        d=p.d,
        arrivals=rc.arrivals,
        seed=rc.seed,
        mean_h=summary.mean_h,
        mean_e=summary.mean_e,
        w_h=summary.w_h,
        w_e=summary.w_e,
        chain_len=summary.chain_len_mean_given_positive,
        ci_half_width=summary.ci_half_width_h,
        theory_value=_theory_w_h(policy, p),
        engine=args.engine,
    )
    _emit([row], args.out)
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    policy = PolicyKind(args.policy)
    p = _market_params(args)
    seed = args.seed if args.seed is not None else 0
    row = _ctmc_row("solve", policy, p, seed)
    _emit([row], args.out)
    return 0


def _limit_text(result: LimitResult, p: MarketParams) -> str:
    scale = p.p_h if result.scaling.value == "1/p_h" else p.p_h**2
    return (
        f"{result.kind.value}, w_h ~ {result.constant:.6g} * "
        f"{result.scaling.value} = {result.constant / scale:.6g}"
    )


def _cmd_theory(args: argparse.Namespace) -> int:
    p = _market_params(args)
    lines = [f"regime: {regime(p).value}"]
    try:
        lines.append(f"bilateral_h: {_limit_text(limit_bilateral_h(p), p)}")
    except ParamError as error:
        lines.append(f"bilateral_h: undefined ({error})")
    try:
        lower, upper, heuristic = bounds_bilateral_e(p)
        lines.append(f"bilateral_e lower: {_limit_text(lower, p)}")
        lines.append(f"bilateral_e upper: {_limit_text(upper, p)}")
        lines.append(f"bilateral_e heuristic: {_limit_text(heuristic, p)}")
    except ParamError as error:
        lines.append(f"bilateral_e: undefined ({error})")
    try:
        lines.append(f"chain(d={p.d}) bound: {_limit_text(bound_chain(p), p)}")
    except ParamError as error:
        lines.append(f"chain(d={p.d}) bound: undefined ({error})")
    try:
        constant = heuristic_chain_constant(p)
        lines.append(
            f"chain(d={p.d}) heuristic: p_h*w_h ~ {constant:.6g} "
            f"= {constant / p.p_h:.6g}"
        )
    except ParamError as error:
        lines.append(f"chain(d={p.d}) heuristic: undefined ({error})")
    try:
        length = chain_length_limit(p.lambda_h, p.lambda_e, p.p_e, p.d)
        lines.append(f"chain(d={p.d}) limiting mean segment length: {length:.6g}")
    except ParamError as error:
        lines.append(f"chain(d={p.d}) segment length: undefined ({error})")
    lines.append(f"critical majority ratio: {critical_ratio():.6g}")
    _write_text(lines, args.out)
    return 0


def _cmd_experiment(args: argparse.Namespace) -> int:
    if args.config is not None:
        spec = load_config(args.config)
        if spec.name != args.name:
            raise ParamError(
                f"config names experiment '{spec.name}', not '{args.name}'"
            )
        arrivals = (
            args.arrivals if args.arrivals is not None else spec.controls.arrivals
        )
        if args.quick:
            arrivals = max(_QUICK_FLOOR, arrivals // _QUICK_DIVISOR)
        controls = replace(
            spec.controls,
            arrivals=arrivals,
            seed=args.seed if args.seed is not None else spec.controls.seed,
        )
        spec = replace(
            spec,
            controls=controls,
            out=args.out if args.out is not None else spec.out,
        )
    else:
        spec = default_spec(
            args.name,
            quick=args.quick,
            seed=args.seed if args.seed is not None else 0,
            arrivals=args.arrivals,
            out=args.out,
        )
    rows = run_experiment(spec)
    for line in _row_lines(rows):
        print(line)
    return 0


def _cmd_couple(args: argparse.Namespace) -> int:
    p = _market_params(args)
    rc = _controls(args, _COUPLE_DEFAULT_ARRIVALS)
    if args.pair == "chain":
        trace = run_coupled_chain(p, rc)
        invariant = "h_a <= h_b"
    else:
        trace = run_coupled_bilateral_e(p, rc)
        invariant = "h_a + e_a <= h_b + 1"
    lines = [
        f"pair: {trace.policy_a.value} vs {trace.policy_b.value}",
        f"epochs: {len(trace.h_a)}",
        f"invariant: {invariant}",
        f"violations: {trace.violation_count}",
    ]
    _write_text(lines, args.out)
    if trace.violation_count:
        raise ConvergenceError(
            f"coupling dominance violated in {trace.violation_count} epochs"
        )
    return 0


def _add_market_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda-h", dest="lambda_h", type=float, default=1.0,
                        help="arrival rate of hard-to-match agents")
    parser.add_argument("--lambda-e", dest="lambda_e", type=float, default=2.0,
                        help="arrival rate of easy-to-match agents")
    parser.add_argument("--p-h", dest="p_h", type=float, default=0.01,
                        help="compatibility probability toward H agents")
    parser.add_argument("--p-e", dest="p_e", type=float, default=0.5,
                        help="compatibility probability toward E agents")
    parser.add_argument("--d", type=int, default=1,
                        help="number of initial bridge agents (chains)")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="base seed")
    common.add_argument("--arrivals", type=int, default=None,
                        help="number of arriving agents to simulate")
    common.add_argument("--out", help="write results to this path")
    common.add_argument("--quick", action="store_true",
                        help="divide the run length by 20")

    parser = argparse.ArgumentParser(
        prog="dynmatch",
        description="Simulation and numerical analysis of dynamic "
        "matching markets with hard- and easy-to-match agents.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common],
                         help="simulate one policy at one grid point")
    sim.add_argument("--policy", required=True,
                     choices=[kind.value for kind in PolicyKind])
    sim.add_argument("--engine", choices=("counts", "graph"),
                     default="counts")
    _add_market_flags(sim)
    sim.set_defaults(func=_cmd_simulate)

    solve = sub.add_parser("solve", parents=[common],
                           help="solve a truncated stationary distribution")
    solve.add_argument(
        "--policy",
        default=PolicyKind.BILATERAL_H.value,
        choices=[
            PolicyKind.BILATERAL_H.value,
            PolicyKind.BILATERAL_E.value,
            PolicyKind.CHAIN_HAT.value,
        ],
    )
    _add_market_flags(solve)
    solve.set_defaults(func=_cmd_solve)

    theory = sub.add_parser("theory", parents=[common],
                            help="print closed-form constants and bounds")
    _add_market_flags(theory)
    theory.set_defaults(func=_cmd_theory)

    exp = sub.add_parser("experiment", parents=[common],
                         help="run a named experiment scenario")
    exp.add_argument("name", choices=EXPERIMENT_NAMES)
    exp.set_defaults(func=_cmd_experiment)

    couple = sub.add_parser("couple", parents=[common],
                            help="verify pathwise dominance of a coupling")
    couple.add_argument("pair", choices=("chain", "bilateral-e"))
    _add_market_flags(couple)
    couple.set_defaults(func=_cmd_couple)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParamError as error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    except (
        ConvergenceError,
        TruncationError,
        SearchBudgetError,
        BoundConditionError,
    ) as error:
        print(f"error: {error}", file=sys.stderr)
        return 3
    except OSError as error:
        print(f"error: {error}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
