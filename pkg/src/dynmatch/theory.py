"""Closed-form waiting-time limits, drift equations, and tail-bound tools.

As p_h -> 0 the mean waiting time of H agents under each policy grows like
``constant / p_h`` (when H agents are in the minority, or under chains) or
``constant / p_h**2`` (when H agents are in the majority).  This module
computes those constants, the break-even points between policies, fixed
points of the exact drift field at finite p_h, and generic exponential tail
bounds for 2-D birth-death-like walks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

from .core import (
    BoundConditionError,
    ConvergenceError,
    MarketParams,
    ParamError,
    PolicyKind,
    Regime,
    regime,
    validate_params,
)
from .ctmc import WalkRates, _bilateral_e_rates, _bilateral_h_rates, _reach_prob

__all__ = [
    "Scaling",
    "Kind",
    "LimitResult",
    "MergeGain",
    "TailBoundSpec",
    "limit_bilateral_h",
    "bounds_bilateral_e",
    "bound_chain",
    "heuristic_chain_constant",
    "chain_length_limit",
    "critical_ratio",
    "competing_rate_threshold",
    "merge_gain",
    "drift_residual",
    "drift_solve",
    "lemma1_lower_tail_bound",
    "lemma2_upper_tail_bound",
]


class Scaling(Enum):
    """Order of growth of the waiting time as p_h -> 0."""

    INV_PH = "1/p_h"
    INV_PH_SQ = "1/p_h**2"


class Kind(Enum):
    """How the constant relates to the true limit."""

    EXACT = "exact"
    UPPER_BOUND = "upper_bound"
    LOWER_BOUND = "lower_bound"
    HEURISTIC = "heuristic"


@dataclass(frozen=True)
class LimitResult:
    """A waiting-time limit: w_h ~ constant / p_h (or / p_h**2)."""

    scaling: Scaling
    constant: float
    kind: Kind

    def __post_init__(self) -> None:
        if not (self.constant > 0 and math.isfinite(self.constant)):
            raise ParamError("limit constant must be positive and finite")


def _require_unbalanced(p: MarketParams) -> Regime:
    r = regime(p)
    if r == Regime.BALANCED:
        raise ParamError(
            "limit constants are undefined when lambda_h equals lambda_e"
        )
    return r


def limit_bilateral_h(p: MarketParams) -> LimitResult:
    """Limiting waiting time of H agents under H-priority bilateral matching.

    Minority (lambda_h < lambda_e):  w_h ~ ln(le/(le-lh)) / (p_e*lh*p_h).
    Majority (lambda_h > lambda_e):  w_h ~ ln(2lh/(lh+le)) / (lh*p_h**2).
    Both are exact limits.
    """
    validate_params(p)
    r = _require_unbalanced(p)
    lh, le = p.lambda_h, p.lambda_e
    if r == Regime.H_MINORITY:
        c = math.log(le / (le - lh)) / (p.p_e * lh)
        return LimitResult(Scaling.INV_PH, c, Kind.EXACT)
    c = math.log(2.0 * lh / (lh + le)) / lh
    return LimitResult(Scaling.INV_PH_SQ, c, Kind.EXACT)


def bounds_bilateral_e(
    p: MarketParams,
) -> Tuple[LimitResult, LimitResult, LimitResult]:
    """(lower, upper, heuristic) limits under E-priority bilateral matching.

    In the minority regime the exact constant is unknown; it is sandwiched
    between ln(le/(le-lh)) and ln(2le/(le-lh)) over p_e*lh, and a drift-based
    heuristic predicts ln((le+lh)/(le-lh)) over p_e*lh.  In the majority
    regime the policy behaves like H-priority and all three coincide.
    """
    validate_params(p)
    r = _require_unbalanced(p)
    lh, le = p.lambda_h, p.lambda_e
    if r == Regime.H_MINORITY:
        denom = p.p_e * lh
        lower = LimitResult(
            Scaling.INV_PH, math.log(le / (le - lh)) / denom, Kind.LOWER_BOUND
        )
        upper = LimitResult(
            Scaling.INV_PH, math.log(2.0 * le / (le - lh)) / denom, Kind.UPPER_BOUND
        )
        heur = LimitResult(
            Scaling.INV_PH, math.log((le + lh) / (le - lh)) / denom, Kind.HEURISTIC
        )
        return lower, upper, heur
    exact = limit_bilateral_h(p)
    return exact, exact, exact


def bound_chain(p: MarketParams) -> LimitResult:
    """Limiting waiting time of H agents under the chain policy.

    w_h <= ln(lh/(le*(1-(1-p_e)**d)) + 1) / (lh*p_h) in the limit; the bound
    is exact when p_e = 1 (where it no longer depends on d).
    """
    validate_params(p)
    if p.lambda_e <= 0:
        raise ParamError("chain waiting-time limit requires lambda_e > 0")
    reach_e = _reach_prob(p.p_e, p.d)
    c = math.log(p.lambda_h / (p.lambda_e * reach_e) + 1.0) / p.lambda_h
    kind = Kind.EXACT if p.p_e == 1.0 else Kind.UPPER_BOUND
    return LimitResult(Scaling.INV_PH, c, kind)


def heuristic_chain_constant(p: MarketParams) -> float:
    """Finite-p_h drift guess for p_h * w_h under the chain policy.

    Derived from the fast-token relaxation: the waiting H pool almost never
    blocks a sweep from dying out at the pool boundary, giving
    p_h*w_h ~ ln((lh+le)/(lh*(1-(1-p_h)**d)+le)) / lh.  Nonincreasing in d
    and -> ln((lh+le)/le)/lh as p_h -> 0.
    """
    validate_params(p)
    if p.lambda_e <= 0:
        raise ParamError("chain waiting-time heuristic requires lambda_e > 0")
    lh, le = p.lambda_h, p.lambda_e
    seg_from_h = lh * _reach_prob(p.p_h, p.d)
    return math.log((lh + le) / (seg_from_h + le)) / lh


def chain_length_limit(
    lambda_h: float, lambda_e: float, p_e: float, d: int
) -> float:
    """Limiting mean chain-segment length as p_h -> 0.

    (lh + le*(1-p_e)**d) / (le*(1-(1-p_e)**d)) + 1: every H agent and every
    bridge-incompatible E agent must eventually be removed by a segment, and
    segments start at rate le*(1-(1-p_e)**d) in the limit.
    """
    if lambda_h <= 0:
        raise ParamError("lambda_h must be positive")
    if lambda_e <= 0:
        raise ParamError("chain length limit requires lambda_e > 0")
    if not (0 < p_e <= 1):
        raise ParamError("p_e must lie in (0, 1]")
    if not isinstance(d, int) or d < 1:
        raise ParamError("d must be an integer >= 1")
    reach_e = _reach_prob(p_e, d)
    miss_e = 1.0 - reach_e
    return (lambda_h + lambda_e * miss_e) / (lambda_e * reach_e) + 1.0


def critical_ratio(tol: float = 1e-12, max_iters: int = 500) -> float:
    """Ratio lambda_h/lambda_e where the majority constant peaks.

    Root of (x+1)*ln(2 - 2/(x+1)) = 1 on (1, 10): below it the majority
    waiting-time constant ln(2x/(x+1))/x (lambda_e fixed) increases with x,
    above it decreases.
    """

    def fn(x: float) -> float:
        return (x + 1.0) * math.log(2.0 - 2.0 / (x + 1.0)) - 1.0

    lo, hi = 1.0 + 1e-9, 10.0
    if not (fn(lo) < 0 < fn(hi)):
        raise ConvergenceError("critical-ratio bracket failed")
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        val = fn(mid)
        if abs(val) <= tol:
            return mid
        if val < 0:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError("critical-ratio bisection did not converge")


def competing_rate_threshold(
    lambda_h: float, lambda_e1: float, p_e: float, d: int
) -> float:
    """Second-market E rate above which chains beat bilateral in market 1.

    An H-majority market (lambda_h > lambda_e1) can either merge with an
    E-supplying market of rate x (bilateral, constant ~ ln-form in x) or run
    chains locally.  The chain constant drops below the merged bilateral
    constant once x exceeds
    lh*(lh+t)**p_e / ((lh+t)**p_e - t**p_e), with t = le1*(1-(1-p_e)**d).
    """
    if lambda_h <= 0:
        raise ParamError("lambda_h must be positive")
    if lambda_e1 <= 0:
        raise ParamError("lambda_e1 must be positive")
    if not (0 < p_e <= 1):
        raise ParamError("p_e must lie in (0, 1]")
    if not isinstance(d, int) or d < 1:
        raise ParamError("d must be an integer >= 1")
    t = lambda_e1 * _reach_prob(p_e, d)
    denom = (lambda_h + t) ** p_e - t**p_e
    if denom <= 0:
        raise ParamError("threshold undefined: degenerate rate gap")
    return lambda_h * (lambda_h + t) ** p_e / denom


@dataclass(frozen=True)
class MergeGain:
    """Effect on market 1's H waiting-time limit of merging with market 2.

    ``gain`` is merged-constant minus standalone-constant (negative means
    merging shortens waits).  If merging changes the scaling order the gain
    is +inf (order got worse: 1/p_h -> 1/p_h**2) or -inf (order improved).
    """

    standalone: LimitResult
    merged: LimitResult
    gain: float
    regime_changed: bool


def merge_gain(p1: MarketParams, p2: MarketParams) -> MergeGain:
    """Waiting-time effect of pooling two markets' arrivals.

    Both markets must share the same compatibility probabilities; the merged
    market has the summed arrival rates.
    """
    validate_params(p1)
    if p2.lambda_h < 0 or p2.lambda_e < 0 or p2.lambda_h + p2.lambda_e <= 0:
        raise ParamError("market 2 arrival rates must be nonnegative, not both 0")
    if (p1.p_h, p1.p_e) != (p2.p_h, p2.p_e):
        raise ParamError("markets must share p_h and p_e to merge")
    merged_params = MarketParams(
        lambda_h=p1.lambda_h + p2.lambda_h,
        lambda_e=p1.lambda_e + p2.lambda_e,
        p_h=p1.p_h,
        p_e=p1.p_e,
        d=p1.d,
    )
    standalone = limit_bilateral_h(p1)
    merged = limit_bilateral_h(merged_params)
    if standalone.scaling == merged.scaling:
        gain = merged.constant - standalone.constant
        changed = False
    elif merged.scaling == Scaling.INV_PH_SQ:
        gain = math.inf  # merging pushed H agents into the majority
        changed = True
    else:
        gain = -math.inf  # merging pulled H agents into the minority
        changed = True
    return MergeGain(standalone=standalone, merged=merged, gain=gain, regime_changed=changed)


def _drift_rates(policy: PolicyKind, p: MarketParams, h: float, e: float) -> WalkRates:
    if policy == PolicyKind.BILATERAL_H:
        return _bilateral_h_rates(h, e, p)
    if policy == PolicyKind.BILATERAL_E:
        return _bilateral_e_rates(h, e, p)
    raise ParamError("drift field is defined for the bilateral policies only")


def drift_residual(
    policy: PolicyKind, p: MarketParams, h: float, e: float
) -> Tuple[float, float]:
    """Net drift (right-left, up-down) of the counts walk at real (h, e)."""
    validate_params(p)
    if h < 0 or e < 0:
        raise ParamError("counts must be nonnegative")
    r = _drift_rates(policy, p, h, e)
    return (r.right - r.left, r.up - r.down)


def _default_drift_start(policy: PolicyKind, p: MarketParams) -> Tuple[float, float]:
    lh, le = p.lambda_h, p.lambda_e
    r = regime(p)
    log_ratio_ee = math.log1p(-p.p_e * p.p_e)
    if r == Regime.H_MINORITY:
        if policy == PolicyKind.BILATERAL_E:
            h0 = math.log((le + lh) / (le - lh)) / (p.p_e * p.p_h)
            e0 = math.log((le + lh) / (2.0 * le)) / log_ratio_ee
        else:
            h0 = math.log(le / (le - lh)) / (p.p_e * p.p_h)
            e0 = -math.log(2.0) / log_ratio_ee
        return h0, max(e0, 0.5)
    h0 = math.log(max(2.0 * lh / (lh + le), 1.25)) / (p.p_h * p.p_h)
    return h0, 0.5


def drift_solve(
    policy: PolicyKind,
    p: MarketParams,
    start: Optional[Tuple[float, float]] = None,
    tol: float = 1e-10,
    max_iters: int = 1000,
) -> Tuple[float, float]:
    """Nonnegative root of the drift field via damped Newton iteration.

    Solves right(h,e) = left(h,e) and up(h,e) = down(h,e) simultaneously;
    the Jacobian is approximated by central differences and each Newton step
    is halved until the residual sup-norm decreases.
    """
    validate_params(p)
    h, e = _default_drift_start(policy, p) if start is None else start
    h, e = max(h, 0.0), max(e, 0.0)

    def residual(hh: float, ee: float) -> Tuple[float, float]:
        return drift_residual(policy, p, hh, ee)

    fx, fy = residual(h, e)
    norm = max(abs(fx), abs(fy))
    for _ in range(max_iters):
        if norm <= tol:
            return h, e
        dh = max(1e-6, 1e-6 * abs(h))
        de = max(1e-6, 1e-6 * abs(e))
        f1p = residual(h + dh, e)
        f1m = residual(max(h - dh, 0.0), e)
        f2p = residual(h, e + de)
        f2m = residual(h, max(e - de, 0.0))
        span_h = h + dh - max(h - dh, 0.0)
        span_e = e + de - max(e - de, 0.0)
        j11 = (f1p[0] - f1m[0]) / span_h
        j21 = (f1p[1] - f1m[1]) / span_h
        j12 = (f2p[0] - f2m[0]) / span_e
        j22 = (f2p[1] - f2m[1]) / span_e
        det = j11 * j22 - j12 * j21
        if det == 0.0 or not math.isfinite(det):
            raise ConvergenceError("drift Jacobian is singular")
        step_h = -(j22 * fx - j12 * fy) / det
        step_e = -(-j21 * fx + j11 * fy) / det
        scale = 1.0
        for _ in range(60):
            h2 = max(h + scale * step_h, 0.0)
            e2 = max(e + scale * step_e, 0.0)
            gx, gy = residual(h2, e2)
            norm2 = max(abs(gx), abs(gy))
            if norm2 < norm:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("drift Newton step stalled")
        h, e, fx, fy, norm = h2, e2, gx, gy, norm2
    if norm <= tol:
        return h, e
    raise ConvergenceError(
        f"drift solve residual {norm:.3e} above {tol:.1e} after {max_iters} iterations"
    )


@dataclass(frozen=True)
class TailBoundSpec:
    """Inputs to the generic exponential tail bounds for a 2-D counts walk.

    ``f``/``g`` bound the walk's own up/down rates (in the first coordinate)
    uniformly over the second coordinate restricted to a set S; ``eta`` is
    the pivot level, ``k`` the depth of the tail, ``rho`` the decay ratio.
    For the lower-tail bound, ``epsilon`` bounds P[second coordinate not in
    S].  For the upper-tail bound, ``c`` and ``delta`` bound that exceptional
    probability by c*delta**x at level x.  Hypotheses are checked on integer
    levels up to ``check_max`` (default: eta + 4k + 50).
    """

    f: Callable[[float], float]
    g: Callable[[float], float]
    eta: int
    k: int
    rho: float
    epsilon: float = 0.0
    c: float = 0.0
    delta: float = 0.0
    check_max: Optional[int] = None

    def levels(self) -> range:
        top = self.check_max
        if top is None:
            top = self.eta + 4 * self.k + 50
        return range(0, top + 1)


_MONO_SLACK = 1e-12


def lemma1_lower_tail_bound(spec: TailBoundSpec) -> float:
    """Bound on P[X <= eta - k] for a walk with drift pushing X upward.

    Requires f nonincreasing and positive (a lower bound on the up rate on
    S), g nondecreasing and positive above 0 (an upper bound on the down
    rate on S), epsilon >= P[Y not in S], and g(eta+1)/f(eta) < rho < 1.
    Returns eta*epsilon*(1 + 1/(f(eta)-g(eta+1))) + rho**k/(1-rho).
    """
    if spec.epsilon < 0:
        raise BoundConditionError("epsilon must be nonnegative")
    if spec.eta < 0 or spec.k <= 0:
        raise BoundConditionError("need eta >= 0 and k > 0")
    levels = spec.levels()
    f_vals = [spec.f(x) for x in levels]
    g_vals = [spec.g(x) for x in levels]
    if any(v <= 0 for v in f_vals):
        raise BoundConditionError("f must be positive on the checked range")
    if any(v < 0 for v in g_vals):
        raise BoundConditionError("g must be nonnegative on the checked range")
    for a, b in zip(f_vals, f_vals[1:]):
        if b > a + _MONO_SLACK:
            raise BoundConditionError("f must be nonincreasing on the checked range")
    for a, b in zip(g_vals, g_vals[1:]):
        if b < a - _MONO_SLACK:
            raise BoundConditionError("g must be nondecreasing on the checked range")
    f_eta = spec.f(spec.eta)
    g_next = spec.g(spec.eta + 1)
    if not (g_next / f_eta < spec.rho < 1.0):
        raise BoundConditionError("need g(eta+1)/f(eta) < rho < 1")
    return spec.eta * spec.epsilon * (1.0 + 1.0 / (f_eta - g_next)) + spec.rho**spec.k / (
        1.0 - spec.rho
    )


def lemma2_upper_tail_bound(spec: TailBoundSpec) -> float:
    """Bound on P[X >= eta + k] for a walk with drift pushing X downward.

    Requires f positive (an upper bound on the up rate on S(x)), g positive
    (a lower bound on the down rate on S(x)), P[Y not in S(x)] <= c*delta**x
    with c >= 0 and 0 <= delta <= rho < 1, f(x)/g(x+1) <= rho for all
    x >= eta, and delta**x/g(x+1) <= rho**x/g(eta+1) on the same range.
    Returns rho**k/(1-rho) * (1 + c + c*(k+1)/(g(eta+1)-f(eta))).
    """
    if spec.c < 0:
        raise BoundConditionError("c must be nonnegative")
    if not (0.0 <= spec.delta < 1.0):
        raise BoundConditionError("delta must lie in [0, 1)")
    if not (spec.delta <= spec.rho < 1.0):
        raise BoundConditionError("need delta <= rho < 1")
    if spec.eta <= 0 or spec.k <= 0:
        raise BoundConditionError("need eta > 0 and k > 0")
    levels = [x for x in spec.levels() if x >= spec.eta]
    if not levels:
        raise BoundConditionError("checked range must reach eta")
    g_next_eta = spec.g(spec.eta + 1)
    if g_next_eta <= 0:
        raise BoundConditionError("g must be positive above eta")
    for x in levels:
        fx, gx1 = spec.f(x), spec.g(x + 1)
        if fx < 0 or gx1 <= 0:
            raise BoundConditionError("need f >= 0 and g > 0 above eta")
        if fx / gx1 > spec.rho + _MONO_SLACK:
            raise BoundConditionError("need f(x)/g(x+1) <= rho for all x >= eta")
        if spec.c > 0 and spec.delta**x / gx1 > spec.rho**x / g_next_eta + _MONO_SLACK:
            raise BoundConditionError(
                "need delta**x/g(x+1) <= rho**x/g(eta+1) for all x >= eta"
            )
    f_eta = spec.f(spec.eta)
    if spec.c > 0 and g_next_eta <= f_eta:
        raise BoundConditionError("need g(eta+1) > f(eta) when c > 0")
    base = spec.rho**spec.k / (1.0 - spec.rho)
    if spec.c == 0:
        return base
    return base * (1.0 + spec.c + spec.c * (spec.k + 1) / (g_next_eta - f_eta))
