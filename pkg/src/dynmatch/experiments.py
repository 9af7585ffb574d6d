"""Named experiment scenarios, a competing-rate root search, and CSV output.

An :class:`ExperimentSpec` couples a recognized scenario name with a
parameter grid and run controls.  Running a spec expands the grid into
simulation or solver tasks — one result row per grid point × policy ×
replica — and merges the rows in a fixed order, so a given (config, seed)
pair always reproduces a byte-identical CSV file.

Row conventions that are not obvious from the field names:

- ``merging`` rows put the *second* market's arrival rates in the
  ``lambda_h``/``lambda_e`` columns and report the change in waiting time
  caused by pooling the two markets (merged minus standalone) in ``w_h``
  and ``w_e``; ``ci_half_width`` combines both runs' half-widths in
  quadrature on the waiting-time scale.
- ``table1-search`` rows put the located root (the competing E arrival
  rate at which bilateral matching ties chains) in ``lambda_e``; the
  count and waiting-time columns describe the chain side of the
  comparison, ``ci_half_width`` is the final bracket half-width, and
  ``theory_value`` is the necessary lower threshold for the root.
- deterministic solver rows (``engine == "ctmc"``) appear once per grid
  point with ``arrivals = 0`` and ``ci_half_width = 0``.
- everywhere else ``ci_half_width`` is the 95% half-width of ``mean_h``
  and ``theory_value`` is the predicted ``w_h`` where a closed form or
  heuristic applies (absent otherwise).
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, fields
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from .core import (
    ConfigError,
    ConvergenceError,
    MarketParams,
    ParamError,
    PolicyKind,
    RunControls,
    little_law,
    validate_controls,
    validate_params,
)
from .counts import run_replica
from .ctmc import (
    BilateralEQuery,
    BilateralHQuery,
    ChainHatQuery,
    expected_chain_length_stationary,
    solve_stationary,
    stationary_moments,
)
from .graphsim import run_graph_replica
from .theory import (
    LimitResult,
    Scaling,
    bounds_bilateral_e,
    competing_rate_threshold,
    heuristic_chain_constant,
    limit_bilateral_h,
    merge_gain,
)

__all__ = [
    "EXPERIMENT_NAMES",
    "ExperimentSpec",
    "ResultRow",
    "default_spec",
    "load_config",
    "run_experiment",
    "table1_search",
    "emit_csv",
    "read_csv",
]

#: Recognized experiment scenario names.
EXPERIMENT_NAMES: Tuple[str, ...] = (
    "priorities",
    "merging",
    "chain-statics",
    "max-vs-local",
    "chains-vs-bilateral",
    "table1-search",
    "heuristic-tightness",
    "solver-vs-sim",
)

_FLOAT_AXES = ("lambda_h", "lambda_e", "lambda_h2", "lambda_e2", "p_h", "p_e")
_INT_AXES = ("d",)
#: Grid axes in canonical iteration order (outermost first).
GRID_AXES: Tuple[str, ...] = _FLOAT_AXES + _INT_AXES

_INT_KEYS = ("arrivals", "seed", "replicas")
_STR_KEYS = ("name", "out")


@dataclass(frozen=True)
class ExperimentSpec:
    """A named scenario: parameter grid, run controls, optional output path.

    ``grid`` maps axis names (a subset of :data:`GRID_AXES`) to value
    lists.  Most scenarios take the Cartesian product of their axes;
    ``heuristic-tightness`` pairs ``lambda_h`` with ``lambda_e``
    positionally, and ``merging`` keeps the first market's rates scalar
    while ``lambda_h2``/``lambda_e2`` span the second market.
    """

    name: str
    grid: Mapping[str, Tuple[float, ...]]
    controls: RunControls
    out: Optional[str] = None

    def __post_init__(self) -> None:
        if self.name not in EXPERIMENT_NAMES:
            raise ConfigError(
                f"unknown experiment name '{self.name}'; "
                f"known: {', '.join(EXPERIMENT_NAMES)}"
            )
        axes = set(self.grid)
        unknown = axes - set(GRID_AXES)
        if unknown:
            raise ConfigError(f"unknown grid axes: {', '.join(sorted(unknown))}")
        required = {"lambda_h", "lambda_e", "p_h", "p_e", "d"}
        if self.name == "merging":
            required |= {"lambda_h2", "lambda_e2"}
        elif "lambda_h2" in axes or "lambda_e2" in axes:
            raise ConfigError(
                "lambda_h2/lambda_e2 apply to the merging experiment only"
            )
        missing = required - axes
        if missing:
            raise ConfigError(f"missing grid axes: {', '.join(sorted(missing))}")
        normalized = {}
        for axis, values in self.grid.items():
            values = tuple(values)
            if not values:
                raise ConfigError(f"grid axis '{axis}' is empty")
            normalized[axis] = values
        object.__setattr__(self, "grid", normalized)
        if self.name == "merging":
            for axis in ("lambda_h", "lambda_e"):
                if len(normalized[axis]) != 1:
                    raise ConfigError(
                        "merging takes single first-market rates; "
                        f"'{axis}' must be one value"
                    )
        if self.name == "heuristic-tightness":
            if len(normalized["lambda_h"]) != len(normalized["lambda_e"]):
                raise ConfigError(
                    "heuristic-tightness pairs lambda_h with lambda_e; "
                    "the lists must have equal length"
                )
        validate_controls(self.controls)


@dataclass(frozen=True)
class ResultRow:
    """One experiment outcome in the declared CSV column order."""

    experiment: str
    policy: str
    lambda_h: float
    lambda_e: float
    p_h: float
    p_e: float
    d: int
    arrivals: int
    seed: int
    mean_h: float
    mean_e: float
    w_h: float
    w_e: float
    chain_len: Optional[float]
    ci_half_width: float
    theory_value: Optional[float]
    engine: str


_CSV_FIELDS: Tuple[str, ...] = tuple(f.name for f in fields(ResultRow))
_INT_FIELDS = {"d", "arrivals", "seed"}
_STR_FIELDS = {"experiment", "policy", "engine"}


# ---------------------------------------------------------------------------
# Default scenario grids
# ---------------------------------------------------------------------------

_DEFAULTS: Dict[str, Dict[str, object]] = {
    "priorities": {
        "grid": {
            "lambda_h": (1.0, 2.0, 3.0, 4.0),
            "lambda_e": (5.0,),
            "p_h": (0.002,),
            "p_e": (0.5,),
            "d": (1,),
        },
        "arrivals": 2_000_000,
    },
    "merging": {
        "grid": {
            "lambda_h": (1.0,),
            "lambda_e": (1.3,),
            "lambda_h2": (0.5, 1.0, 1.5, 2.0),
            "lambda_e2": (0.65, 1.3, 1.95, 2.6),
            "p_h": (0.02,),
            "p_e": (0.5,),
            "d": (1,),
        },
        "arrivals": 100_000,
    },
    "chain-statics": {
        "grid": {
            "lambda_h": (1.0, 2.0, 3.0, 4.0, 5.0),
            "lambda_e": (1.0, 2.0, 3.0, 4.0, 5.0),
            "p_h": (0.02,),
            "p_e": (0.5,),
            "d": (1, 5, 20),
        },
        "arrivals": 100_000,
    },
    "max-vs-local": {
        "grid": {
            "lambda_h": (0.5, 1.0, 1.5, 2.0),
            "lambda_e": (2.0,),
            "p_h": (0.002,),
            "p_e": (0.5,),
            "d": (1,),
        },
        "arrivals": 100_000,
    },
    "chains-vs-bilateral": {
        "grid": {
            "lambda_h": (1.0, 2.0, 3.0, 4.0),
            "lambda_e": (5.0,),
            "p_h": (0.02,),
            "p_e": (0.5,),
            "d": (1, 20),
        },
        "arrivals": 2_000_000,
    },
    "table1-search": {
        "grid": {
            "lambda_h": (1.0,),
            "lambda_e": (2.0,),
            "p_h": (0.02,),
            "p_e": (0.1, 0.3, 0.5, 0.9, 1.0),
            "d": (1, 10, 50),
        },
        "arrivals": 1_000_000,
    },
    "heuristic-tightness": {
        "grid": {
            "lambda_h": (1.0, 2.0, 3.0, 4.0, 3.0, 3.0),
            "lambda_e": (5.0, 5.0, 5.0, 5.0, 3.0, 2.0),
            "p_h": (0.002,),
            "p_e": (0.5,),
            "d": (1,),
        },
        "arrivals": 100_000,
    },
    "solver-vs-sim": {
        "grid": {
            "lambda_h": (1.0,),
            "lambda_e": (2.0,),
            "p_h": (0.05,),
            "p_e": (0.5,),
            "d": (1,),
        },
        "arrivals": 200_000,
    },
}

#: Minimum run length kept when ``quick`` shrinks a scenario.
_QUICK_FLOOR = 400


def default_spec(
    name: str,
    quick: bool = False,
    seed: int = 0,
    arrivals: Optional[int] = None,
    replicas: int = 1,
    out: Optional[str] = None,
) -> ExperimentSpec:
    """Scenario defaults; ``quick`` divides the run length by 20."""
    if name not in _DEFAULTS:
        raise ConfigError(
            f"unknown experiment name '{name}'; "
            f"known: {', '.join(EXPERIMENT_NAMES)}"
        )
    base = _DEFAULTS[name]
    t = int(base["arrivals"]) if arrivals is None else arrivals
    if quick:
        t = max(_QUICK_FLOOR, t // 20)
    controls = RunControls(arrivals=t, seed=seed, replicas=replicas)
    return ExperimentSpec(name=name, grid=dict(base["grid"]), controls=controls, out=out)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _config_error(line: int, message: str) -> ConfigError:
    return ConfigError(f"line {line}: {message}")


def _parse_float(token: str, key: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise _config_error(line, f"'{key}' expects numbers, got {token!r}") from None
    if not math.isfinite(value):
        raise _config_error(line, f"'{key}' must be finite")
    return value


def _parse_int(token: str, key: str, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise _config_error(line, f"'{key}' expects integers, got {token!r}") from None


def _split_list(value: str, key: str, line: int) -> List[str]:
    tokens = [token.strip() for token in value.split(",")]
    if not value.strip() or any(not token for token in tokens):
        raise _config_error(line, f"'{key}' expects a comma-separated list")
    return tokens


def _check_range(key: str, parsed: object, line: int) -> None:
    if key in ("p_h", "p_e"):
        for v in parsed:  # type: ignore[union-attr]
            if not 0 < v <= 1:
                raise _config_error(line, f"'{key}' must lie in (0, 1], got {v:g}")
    elif key == "lambda_h":
        for v in parsed:  # type: ignore[union-attr]
            if v <= 0:
                raise _config_error(line, f"'{key}' must be positive, got {v:g}")
    elif key in ("lambda_e", "lambda_h2", "lambda_e2"):
        for v in parsed:  # type: ignore[union-attr]
            if v < 0:
                raise _config_error(line, f"'{key}' must be nonnegative, got {v:g}")
    elif key == "d":
        for v in parsed:  # type: ignore[union-attr]
            if v < 1:
                raise _config_error(line, f"'{key}' must be >= 1, got {v}")
    elif key == "arrivals":
        if parsed < 40:  # type: ignore[operator]
            raise _config_error(line, f"'{key}' must be >= 40, got {parsed}")
    elif key == "seed":
        if not 0 <= parsed < 2**64:  # type: ignore[operator]
            raise _config_error(line, f"'{key}' must lie in [0, 2**64), got {parsed}")
    elif key == "replicas":
        if parsed < 1:  # type: ignore[operator]
            raise _config_error(line, f"'{key}' must be >= 1, got {parsed}")


def load_config(path: str) -> ExperimentSpec:
    """Parse a plain-text ``key = value`` experiment config.

    Lists are comma-separated, ``#`` starts a comment, and keys left out
    fall back to the named scenario's defaults.  Parse errors (unknown
    key, bad type or range, unknown experiment name) carry the offending
    line number.
    """
    with open(path, "r", encoding="utf-8") as handle:
        raw_lines = handle.readlines()
    entries: Dict[str, object] = {}
    for line_no, raw in enumerate(raw_lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise _config_error(line_no, f"expected 'key = value', got {text!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        value = value.strip()
        if key in entries:
            raise _config_error(line_no, f"duplicate key '{key}'")
        if key == "name":
            if value not in EXPERIMENT_NAMES:
                raise _config_error(
                    line_no,
                    f"unknown experiment name '{value}'; "
                    f"known: {', '.join(EXPERIMENT_NAMES)}",
                )
            entries[key] = value
        elif key == "out":
            if not value:
                raise _config_error(line_no, "'out' expects a path")
            entries[key] = value
        elif key in _INT_KEYS:
            entries[key] = _parse_int(value, key, line_no)
        elif key in _INT_AXES:
            entries[key] = tuple(
                _parse_int(token, key, line_no)
                for token in _split_list(value, key, line_no)
            )
        elif key in _FLOAT_AXES:
            entries[key] = tuple(
                _parse_float(token, key, line_no)
                for token in _split_list(value, key, line_no)
            )
        else:
            raise _config_error(line_no, f"unknown key '{key}'")
        _check_range(key, entries[key], line_no)
    if "name" not in entries:
        raise ConfigError("missing required key 'name'")
    name = str(entries.pop("name"))
    base = default_spec(name)
    grid = dict(base.grid)
    for axis in GRID_AXES:
        if axis in entries:
            grid[axis] = entries.pop(axis)
    controls = RunControls(
        arrivals=int(entries.pop("arrivals", base.controls.arrivals)),
        warmup_fraction=base.controls.warmup_fraction,
        seed=int(entries.pop("seed", base.controls.seed)),
        replicas=int(entries.pop("replicas", base.controls.replicas)),
    )
    out = entries.pop("out", None)
    return ExperimentSpec(
        name=name,
        grid=grid,
        controls=controls,
        out=None if out is None else str(out),
    )


# ---------------------------------------------------------------------------
# Theory attachments
# ---------------------------------------------------------------------------


def _limit_scale(result: LimitResult, p: MarketParams) -> float:
    return p.p_h if result.scaling is Scaling.INV_PH else p.p_h**2


def _theory_w_h(policy: PolicyKind, p: MarketParams) -> Optional[float]:
    """Predicted waiting time of H agents, or None where no form applies."""
    try:
        if policy is PolicyKind.BILATERAL_H:
            result = limit_bilateral_h(p)
        elif policy is PolicyKind.BILATERAL_E:
            result = bounds_bilateral_e(p)[2]
        elif policy in (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT):
            return heuristic_chain_constant(p) / p.p_h
        else:
            return None
    except ParamError:
        return None
    return result.constant / _limit_scale(result, p)


def _theory_merge_delta(p1: MarketParams, p2: MarketParams) -> Optional[float]:
    """Predicted change in market 1's w_h from merging, or None."""
    try:
        gain = merge_gain(p1, p2)
    except ParamError:
        return None
    if gain.regime_changed or not math.isfinite(gain.gain):
        return None
    return gain.gain / _limit_scale(gain.merged, p1)


# ---------------------------------------------------------------------------
# Task expansion and execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    """One unit of work; ``index`` fixes its row's place in the output."""

    index: int
    experiment: str
    kind: str  # counts | graph | ctmc | merge | table1
    policy: str
    p: MarketParams
    rc: RunControls
    replica: int
    p_base: Optional[MarketParams] = None  # merge only: standalone market 1


def _grid_points(spec: ExperimentSpec) -> Iterator[Dict[str, float]]:
    """Cartesian product over the spec's axes in canonical order.

    ``heuristic-tightness`` zips ``lambda_h`` with ``lambda_e`` instead of
    crossing them.
    """
    grid = spec.grid
    if spec.name == "heuristic-tightness":
        pairs = list(zip(grid["lambda_h"], grid["lambda_e"]))
        rest = [axis for axis in GRID_AXES if axis in grid and axis not in ("lambda_h", "lambda_e")]
        for lh, le in pairs:
            for values in product(*(grid[axis] for axis in rest)):
                point = dict(zip(rest, values))
                point["lambda_h"] = lh
                point["lambda_e"] = le
                yield point
        return
    axes = [axis for axis in GRID_AXES if axis in grid]
    for values in product(*(grid[axis] for axis in axes)):
        yield dict(zip(axes, values))


_SCENARIO_POLICIES: Dict[str, Tuple[PolicyKind, ...]] = {
    "priorities": (PolicyKind.BILATERAL_H, PolicyKind.BILATERAL_E),
    "chain-statics": (PolicyKind.CHAIN,),
    "max-vs-local": (PolicyKind.CHAIN, PolicyKind.MAX_CHAINS),
    "chains-vs-bilateral": (PolicyKind.BILATERAL_H, PolicyKind.CHAIN),
}

_SOLVER_VS_SIM_LEGS: Tuple[Tuple[PolicyKind, Tuple[str, ...]], ...] = (
    (PolicyKind.BILATERAL_H, ("counts", "graph", "ctmc")),
    (PolicyKind.BILATERAL_E, ("counts", "graph", "ctmc")),
    (PolicyKind.CHAIN, ("counts", "graph")),
    (PolicyKind.CHAIN_HAT, ("counts", "graph", "ctmc")),
)


def _point_params(point: Mapping[str, float]) -> MarketParams:
    return validate_params(
        MarketParams(
            lambda_h=point["lambda_h"],
            lambda_e=point["lambda_e"],
            p_h=point["p_h"],
            p_e=point["p_e"],
            d=int(point["d"]),
        )
    )


def _build_tasks(spec: ExperimentSpec) -> List[_Task]:
    rc = spec.controls
    replicas = range(rc.replicas)
    tasks: List[_Task] = []

    def add(kind: str, policy: str, p: MarketParams, replica: int,
            p_base: Optional[MarketParams] = None) -> None:
        tasks.append(
            _Task(len(tasks), spec.name, kind, policy, p, rc, replica, p_base)
        )

    if spec.name == "merging":
        for point in _grid_points(spec):
            p1 = _point_params(point)
            merged = validate_params(
                MarketParams(
                    lambda_h=point["lambda_h"] + point["lambda_h2"],
                    lambda_e=point["lambda_e"] + point["lambda_e2"],
                    p_h=point["p_h"],
                    p_e=point["p_e"],
                    d=int(point["d"]),
                )
            )
            for replica in replicas:
                add("merge", PolicyKind.BILATERAL_H.value, merged, replica, p1)
    elif spec.name == "table1-search":
        for point in _grid_points(spec):
            p = _point_params(point)
            for replica in replicas:
                add("table1", "search", p, replica)
    elif spec.name == "heuristic-tightness":
        for point in _grid_points(spec):
            p = _point_params(point)
            policy = (
                PolicyKind.BILATERAL_E
                if p.lambda_h < p.lambda_e
                else PolicyKind.CHAIN
            )
            for replica in replicas:
                add("counts", policy.value, p, replica)
    elif spec.name == "solver-vs-sim":
        for point in _grid_points(spec):
            p = _point_params(point)
            for policy, engines in _SOLVER_VS_SIM_LEGS:
                for engine in engines:
                    if engine == "ctmc":
                        add("ctmc", policy.value, p, 0)
                    else:
                        for replica in replicas:
                            add(engine, policy.value, p, replica)
    else:
        policies = _SCENARIO_POLICIES[spec.name]
        kind = "graph" if spec.name == "max-vs-local" else "counts"
        for point in _grid_points(spec):
            p = _point_params(point)
            for policy in policies:
                for replica in replicas:
                    add(kind, policy.value, p, replica)
    return tasks


def _summary_row(task: _Task, summary, engine: str) -> ResultRow:
    policy = PolicyKind(task.policy)
    return ResultRow(
        experiment=task.experiment,
        policy=task.policy,
        lambda_h=task.p.lambda_h,
        lambda_e=task.p.lambda_e,
        p_h=task.p.p_h,
        p_e=task.p.p_e,
        d=task.p.d,
        arrivals=task.rc.arrivals,
        seed=task.rc.seed,
        mean_h=summary.mean_h,
        mean_e=summary.mean_e,
        w_h=summary.w_h,
        w_e=summary.w_e,
        chain_len=summary.chain_len_mean_given_positive,
        ci_half_width=summary.ci_half_width_h,
        theory_value=_theory_w_h(policy, task.p),
        engine=engine,
    )


def _ctmc_row(experiment: str, policy: PolicyKind, p: MarketParams, seed: int) -> ResultRow:
    if policy is PolicyKind.BILATERAL_H:
        query = BilateralHQuery(p)
    elif policy is PolicyKind.BILATERAL_E:
        query = BilateralEQuery(p)
    elif policy is PolicyKind.CHAIN_HAT:
        query = ChainHatQuery(p)
    else:
        raise ParamError(f"{policy.value} has no exact stationary solver")
    moments = stationary_moments(solve_stationary(query))
    chain_len = (
        expected_chain_length_stationary(p)
        if policy is PolicyKind.CHAIN_HAT
        else None
    )
    return ResultRow(
        experiment=experiment,
        policy=policy.value,
        lambda_h=p.lambda_h,
        lambda_e=p.lambda_e,
        p_h=p.p_h,
        p_e=p.p_e,
        d=p.d,
        arrivals=0,
        seed=seed,
        mean_h=moments.mean_h,
        mean_e=moments.mean_e,
        w_h=little_law(moments.mean_h, p.lambda_h),
        w_e=little_law(moments.mean_e, p.lambda_e) if p.lambda_e > 0 else 0.0,
        chain_len=chain_len,
        ci_half_width=0.0,
        theory_value=_theory_w_h(policy, p),
        engine="ctmc",
    )


def _merge_row(task: _Task) -> ResultRow:
    assert task.p_base is not None
    merged = run_replica(PolicyKind.BILATERAL_H, task.p, task.rc, replica=task.replica)
    alone = run_replica(
        PolicyKind.BILATERAL_H, task.p_base, task.rc, replica=task.replica
    )
    p2 = MarketParams(
        lambda_h=task.p.lambda_h - task.p_base.lambda_h,
        lambda_e=task.p.lambda_e - task.p_base.lambda_e,
        p_h=task.p.p_h,
        p_e=task.p.p_e,
        d=task.p.d,
    )
    half_width = math.hypot(
        merged.ci_half_width_h / task.p.lambda_h,
        alone.ci_half_width_h / task.p_base.lambda_h,
    )
    return ResultRow(
        experiment=task.experiment,
        policy=task.policy,
        lambda_h=p2.lambda_h,
        lambda_e=p2.lambda_e,
        p_h=task.p.p_h,
        p_e=task.p.p_e,
        d=task.p.d,
        arrivals=task.rc.arrivals,
        seed=task.rc.seed,
        mean_h=merged.mean_h,
        mean_e=merged.mean_e,
        w_h=merged.w_h - alone.w_h,
        w_e=merged.w_e - alone.w_e,
        chain_len=None,
        ci_half_width=half_width,
        theory_value=_theory_merge_delta(task.p_base, p2),
        engine="counts",
    )


def _table1_row(task: _Task) -> ResultRow:
    p = task.p
    root, half_width, _, chain_side, threshold = _table1_cell(
        p.lambda_h,
        p.lambda_e,
        p.p_e,
        p.d,
        task.rc,
        p_h=p.p_h,
        replica_base=2 * task.replica,
    )
    return ResultRow(
        experiment=task.experiment,
        policy=task.policy,
        lambda_h=p.lambda_h,
        lambda_e=root,
        p_h=p.p_h,
        p_e=p.p_e,
        d=p.d,
        arrivals=task.rc.arrivals,
        seed=task.rc.seed,
        mean_h=chain_side.mean_h,
        mean_e=chain_side.mean_e,
        w_h=chain_side.w_h,
        w_e=chain_side.w_e,
        chain_len=chain_side.chain_len_mean_given_positive,
        ci_half_width=half_width,
        theory_value=threshold,
        engine="counts",
    )


def _run_task(task: _Task) -> ResultRow:
    if task.kind == "counts":
        summary = run_replica(
            PolicyKind(task.policy), task.p, task.rc, replica=task.replica
        )
        return _summary_row(task, summary, "counts")
    if task.kind == "graph":
        result = run_graph_replica(
            PolicyKind(task.policy), task.p, task.rc, replica=task.replica
        )
        return _summary_row(task, result.summary, "graph")
    if task.kind == "ctmc":
        return _ctmc_row(
            task.experiment, PolicyKind(task.policy), task.p, task.rc.seed
        )
    if task.kind == "merge":
        return _merge_row(task)
    return _table1_row(task)


def run_experiment(
    spec: ExperimentSpec, workers: Optional[int] = None
) -> List[ResultRow]:
    """Expand the grid and run every task, returning rows in grid order.

    Rows come out ordered by grid point, then policy, then replica;
    results carry their task index, so completion order never matters.
    With ``workers`` > 1 tasks run in a process pool (the default uses
    one task per available CPU).  When ``spec.out`` is set the rows are
    also written there as CSV — including the rows completed so far if an
    engine error aborts the run midway.
    """
    tasks = _build_tasks(spec)
    if workers is None:
        workers = os.cpu_count() or 1
    rows: List[ResultRow] = []
    try:
        if workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for row in pool.map(_run_task, tasks):
                    rows.append(row)
        else:
            for task in tasks:
                rows.append(_run_task(task))
    except Exception:
        if spec.out is not None:
            emit_csv(rows, spec.out)
        raise
    if spec.out is not None:
        emit_csv(rows, spec.out)
    return rows


# ---------------------------------------------------------------------------
# Competing-rate root search
# ---------------------------------------------------------------------------


def _table1_cell(
    lambda_h: float,
    lambda_e1: float,
    p_e: float,
    d: int,
    rc: RunControls,
    p_h: float = 0.02,
    tol: float = 0.05,
    hi_factor: float = 50.0,
    replica_base: int = 0,
):
    """Locate the competing E rate where bilateral matching ties chains.

    Returns (root, bracket half-width, ci_limited flag, chain-side
    summary, necessary threshold).  The chain side is simulated once; all
    bilateral evaluations share one random stream (common random numbers)
    so the sign of the waiting-time difference is stable across bisection
    steps.
    """
    validate_controls(rc)
    threshold = competing_rate_threshold(lambda_h, lambda_e1, p_e, d)
    chain_params = validate_params(MarketParams(lambda_h, lambda_e1, p_h, p_e, d))
    chain_side = run_replica(
        PolicyKind.CHAIN, chain_params, rc, replica=replica_base
    )
    target = chain_side.w_h
    target_ci = chain_side.ci_half_width_h / lambda_h

    def evaluate(rate: float) -> Tuple[float, float]:
        summary = run_replica(
            PolicyKind.BILATERAL_H,
            MarketParams(lambda_h, rate, p_h, p_e, d),
            rc,
            replica=replica_base + 1,
        )
        diff = summary.w_h - target
        return diff, summary.ci_half_width_h / lambda_h + target_ci

    def warn_limited(rate: float) -> None:
        warnings.warn(
            "competing-rate search stopped early at "
            f"lambda_e2={rate:.6g}: confidence intervals prevent a sign "
            "decision",
            stacklevel=3,
        )

    lo, hi = threshold, hi_factor * threshold
    f_lo, ci_lo = evaluate(lo)
    if f_lo <= 0.0:
        if -f_lo <= ci_lo:
            warn_limited(lo)
            return lo, 0.5 * tol, True, chain_side, threshold
        raise ConvergenceError("bracket does not straddle a sign change")
    f_hi, ci_hi = evaluate(hi)
    if f_hi >= 0.0:
        if f_hi <= ci_hi:
            warn_limited(hi)
            return hi, 0.5 * tol, True, chain_side, threshold
        raise ConvergenceError("bracket does not straddle a sign change")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid, ci_mid = evaluate(mid)
        if abs(f_mid) <= ci_mid:
            warn_limited(mid)
            return mid, 0.5 * (hi - lo), True, chain_side, threshold
        if f_mid > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), 0.5 * (hi - lo), False, chain_side, threshold


def table1_search(
    lambda_h: float,
    lambda_e1: float,
    p_e: float,
    d: int,
    rc: RunControls,
    p_h: float = 0.02,
    tol: float = 0.05,
    hi_factor: float = 50.0,
) -> float:
    """Competing E arrival rate at which bilateral matching ties chains.

    Bisects over the E arrival rate x of a hypothetical second market for
    the root of w_h(bilateral at (lambda_h, x)) − w_h(chain at (lambda_h,
    lambda_e1)), both sides estimated by simulation.  The bracket starts
    at [threshold, hi_factor × threshold] with the threshold from
    :func:`competing_rate_threshold` (a necessary lower bound for the
    root, so the result never falls below it).  The search stops when the
    bracket is narrower than ``tol`` or as soon as overlapping confidence
    intervals prevent a sign decision (reported via a warning).
    """
    root, _, _, _, _ = _table1_cell(
        lambda_h, lambda_e1, p_e, d, rc, p_h=p_h, tol=tol, hi_factor=hi_factor
    )
    return root


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def _format_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".6g")


def emit_csv(rows: Sequence[ResultRow], path: str) -> None:
    """Write rows as CSV: declared header, 6 significant digits, as given.

    Row order is preserved (callers provide grid order), missing values
    are empty cells, and the line terminator is fixed so equal inputs
    yield byte-identical files on every platform.
    """
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_CSV_FIELDS)
        for row in rows:
            writer.writerow(
                [_format_cell(getattr(row, name)) for name in _CSV_FIELDS]
            )


def read_csv(path: str) -> List[ResultRow]:
    """Parse a file written by :func:`emit_csv` back into rows."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != list(_CSV_FIELDS):
            raise ConfigError(f"unexpected CSV header in {path}")
        rows = []
        for record in reader:
            values: Dict[str, object] = {}
            for name, text in zip(_CSV_FIELDS, record):
                if name in _STR_FIELDS:
                    values[name] = text
                elif not text:
                    values[name] = None
                elif name in _INT_FIELDS:
                    values[name] = int(text)
                else:
                    values[name] = float(text)
            rows.append(ResultRow(**values))  # type: ignore[arg-type]
    return rows
