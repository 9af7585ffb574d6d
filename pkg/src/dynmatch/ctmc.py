"""Exact transition rates and stationary analysis for the matching policies.

Between arrivals nothing happens, so every policy whose decisions depend only
on the waiting counts induces a continuous-time Markov chain on those counts.
This module provides the exact transition rates of the bilateral policies (a
2-D walk on (h, e)), of the strict chain policy (a 1-D chain on h with
multi-step downward jumps), and of a token-based chain variant, together with
a truncated-grid stationary solver and the segment-size distribution that the
chain jumps are built from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import (
    ConvergenceError,
    CountsState,
    MarketParams,
    ParamError,
    PolicyKind,
    Regime,
    TruncationError,
    regime,
    validate_params,
)

__all__ = [
    "WalkRates",
    "ChainSegDist",
    "TruncationSpec",
    "StationaryDistribution",
    "StationaryMoments",
    "rates_bilateral_h",
    "rates_bilateral_e",
    "chain_seg_pmf",
    "check_memoryless",
    "rates_chain_hat",
    "rates_token_chain",
    "BilateralHQuery",
    "BilateralEQuery",
    "ChainHatQuery",
    "TokenChainQuery",
    "default_truncation",
    "solve_stationary",
    "stationary_moments",
    "expected_chain_length_stationary",
    "chain_flow_balance_length",
    "default_token_service_rate",
]

State = Union[int, Tuple[int, ...]]


@dataclass(frozen=True)
class WalkRates:
    """Transition rates of the 2-D counts walk out of one state.

    ``right``/``left`` move h up/down by one; ``up``/``down`` move e.
    """

    right: float
    left: float
    up: float
    down: float

    def total(self) -> float:
        return self.right + self.left + self.up + self.down


def _pow(base: float, exponent: float) -> float:
    """base**exponent with base in [0, 1], stable for large real exponents."""
    if base == 0.0:
        return 0.0 if exponent > 0 else 1.0
    return math.exp(exponent * math.log(base))


def _bilateral_h_rates(h: float, e: float, p: MarketParams) -> WalkRates:
    """Rates of the H-first bilateral walk at real-valued counts."""
    qhh = _pow(1.0 - p.p_h * p.p_h, h)  # no two-way H-H edge with any of h
    qeh = _pow(1.0 - p.p_e * p.p_h, h)  # no two-way E-H edge with any of h
    qhe = _pow(1.0 - p.p_e * p.p_h, e)
    qee = _pow(1.0 - p.p_e * p.p_e, e)
    right = p.lambda_h * qhh * qhe
    left = p.lambda_h * (1.0 - qhh) + p.lambda_e * (1.0 - qeh)
    up = p.lambda_e * qeh * qee
    down = p.lambda_h * qhh * (1.0 - qhe) + p.lambda_e * qeh * (1.0 - qee)
    return WalkRates(right, left, up, down)


def _bilateral_e_rates(h: float, e: float, p: MarketParams) -> WalkRates:
    """Rates of the E-first bilateral walk at real-valued counts."""
    qhh = _pow(1.0 - p.p_h * p.p_h, h)
    qeh = _pow(1.0 - p.p_e * p.p_h, h)
    qhe = _pow(1.0 - p.p_e * p.p_h, e)
    qee = _pow(1.0 - p.p_e * p.p_e, e)
    right = p.lambda_h * qhh * qhe
    left = p.lambda_h * qhe * (1.0 - qhh) + p.lambda_e * qee * (1.0 - qeh)
    up = p.lambda_e * qeh * qee
    down = p.lambda_h * (1.0 - qhe) + p.lambda_e * (1.0 - qee)
    return WalkRates(right, left, up, down)


def _check_counts(s: CountsState) -> None:
    if s.h < 0 or s.e < 0:
        raise ParamError("counts must be nonnegative")


def rates_bilateral_h(s: CountsState, p: MarketParams) -> WalkRates:
    """Exact walk rates under bilateral matching with H-priority.

    A new H agent is matched against the h waiting H agents first (two-way
    edge probability p_h**2 each), then against the e waiting E agents
    (probability p_e*p_h each); a new E agent also tries H first.  An
    unmatched arrival joins its queue.
    """
    validate_params(p)
    _check_counts(s)
    return _bilateral_h_rates(s.h, s.e, p)


def rates_bilateral_e(s: CountsState, p: MarketParams) -> WalkRates:
    """Exact walk rates under bilateral matching with E-priority."""
    validate_params(p)
    _check_counts(s)
    return _bilateral_e_rates(s.h, s.e, p)


@dataclass(frozen=True)
class ChainSegDist:
    """Distribution of the number of waiting H agents a segment removes.

    A segment sweeping a pool of ``h`` waiting H agents removes them one at a
    time; after i removals the next H is reached with probability
    1 - (1-p_h)**(h-i), so the removal count ``S`` has

        P[S >= k] = prod_{j<k} (1 - (1-p_h)**(h-j)),
        P[S = i]  = (1-p_h)**(h-i) * prod_{j<i} (1 - (1-p_h)**(h-j)).

    ``pmf[i]`` is P[S = i] for i = 0..h; ``survival[k]`` is P[S >= k] for
    k = 0..h+1 (so survival[h+1] = 0).
    """

    h: int
    p_h: float
    pmf: np.ndarray = field(repr=False)
    survival: np.ndarray = field(repr=False)

    def tail(self, k: int) -> float:
        """P[S >= k]."""
        if k <= 0:
            return 1.0
        if k > self.h:
            return 0.0
        return float(self.survival[k])

    def mean(self) -> float:
        # E[S] = sum_{k>=1} P[S >= k]
        return float(self.survival[1:].sum())


def chain_seg_pmf(h: int, p_h: float) -> ChainSegDist:
    """Segment removal-count distribution over a pool of h waiting H agents."""
    if not isinstance(h, int) or h < 0:
        raise ParamError("h must be a nonnegative integer")
    if not (0 < p_h <= 1):
        raise ParamError("p_h must lie in (0, 1]")
    log_q = math.log1p(-p_h) if p_h < 1 else -math.inf
    j = np.arange(h + 1, dtype=float)
    if p_h < 1:
        # reach[j] = 1 - (1-p_h)**(h-j): probability the sweep continues
        # past the j-th removal; qpow[i] = (1-p_h)**(h-i).
        qpow = np.exp((h - j) * log_q)
        reach = -np.expm1((h - j) * log_q)
    else:
        qpow = np.where(j == h, 1.0, 0.0)
        reach = np.where(j == h, 0.0, 1.0)
    survival = np.empty(h + 2)
    survival[0] = 1.0
    np.cumprod(reach, out=survival[1:])  # survival[k] = prod_{j<k} reach[j]
    pmf = qpow * survival[: h + 1]
    return ChainSegDist(h=h, p_h=p_h, pmf=pmf, survival=survival)


def check_memoryless(h: int, i_tilde: int, i: int, p_h: float) -> float:
    """Residual of the segment-sweep restart identity.

    Conditioned on removing at least ``i_tilde`` agents, the remaining
    removals behave like a fresh sweep over h - i_tilde agents:
    P[S_h = i] = P[S_h >= i_tilde] * P[S_{h-i_tilde} = i - i_tilde].
    Returns |lhs - rhs|.
    """
    if not (0 <= i_tilde <= i <= h):
        raise ParamError("need 0 <= i_tilde <= i <= h")
    full = chain_seg_pmf(h, p_h)
    rest = chain_seg_pmf(h - i_tilde, p_h)
    lhs = float(full.pmf[i])
    rhs = full.tail(i_tilde) * float(rest.pmf[i - i_tilde])
    return abs(lhs - rhs)


def _reach_prob(prob: float, n: float) -> float:
    """1 - (1-prob)**n, computed stably."""
    if prob >= 1.0:
        return 1.0 if n > 0 else 0.0
    return -math.expm1(n * math.log1p(-prob))


def _chain_hat_up_rate(p: MarketParams) -> float:
    return p.lambda_h * _pow(1.0 - p.p_h, p.d)


def _chain_seg_start_rate(p: MarketParams) -> float:
    """Total rate at which some arrival connects to one of the d bridges."""
    return p.lambda_h * _reach_prob(p.p_h, p.d) + p.lambda_e * _reach_prob(
        p.p_e, p.d
    )


def rates_chain_hat(h: int, p: MarketParams) -> Dict[int, float]:
    """Exact transition rates of the strict chain policy out of count h.

    Unmatched E arrivals leave immediately, so the state is the waiting H
    count alone.  h -> h+1 at rate lambda_h*(1-p_h)**d; h -> h-i (i >= 1) at
    rate Lambda * P[S_h = i] where Lambda is the total segment-start rate.
    """
    validate_params(p)
    if not isinstance(h, int) or h < 0:
        raise ParamError("h must be a nonnegative integer")
    rates: Dict[int, float] = {h + 1: _chain_hat_up_rate(p)}
    seg_rate = _chain_seg_start_rate(p)
    dist = chain_seg_pmf(h, p.p_h)
    for i in range(1, h + 1):
        r = seg_rate * float(dist.pmf[i])
        if r > 0.0:
            rates[h - i] = r
    return rates


def default_token_service_rate(p: MarketParams) -> float:
    """Default token pass rate: fast enough to be effectively instantaneous."""
    return 1e3 * (p.lambda_h + p.lambda_e)


def rates_token_chain(
    state: Tuple[int, int, int], p: MarketParams, mu: Optional[float] = None
) -> Dict[Tuple[int, int, int], float]:
    """Transition rates of the token-passing chain relaxation.

    State (h, e, u): waiting counts plus a token flag.  While the token is
    free (u = 0), arrivals either join their queue (missing all d bridges) or
    activate the token.  While active (u = 1), the token is passed at rate
    ``mu``: it advances to a waiting H with probability 1-(1-p_h)**h, else to
    a waiting E with probability 1-(1-p_e)**e, else the sweep stops.
    """
    validate_params(p)
    if mu is None:
        mu = default_token_service_rate(p)
    if mu <= 0:
        raise ParamError("mu must be positive")
    h, e, u = state
    if h < 0 or e < 0 or u not in (0, 1):
        raise ParamError("state must be (h >= 0, e >= 0, u in {0, 1})")
    qh = _pow(1.0 - p.p_h, h)
    qe = _pow(1.0 - p.p_e, e)
    out: Dict[Tuple[int, int, int], float] = {}
    if u == 0:
        miss_h = _pow(1.0 - p.p_h, p.d)
        miss_e = _pow(1.0 - p.p_e, p.d)
        out[(h + 1, e, 0)] = p.lambda_h * miss_h
        if p.lambda_e > 0:
            out[(h, e + 1, 0)] = p.lambda_e * miss_e
        activate = p.lambda_h * (1.0 - miss_h) + p.lambda_e * (1.0 - miss_e)
        out[(h, e, 1)] = activate
    else:
        out[(h, e, 0)] = mu * qh * qe  # sweep stops, token parks
        if h > 0:
            out[(h - 1, e, 1)] = mu * (1.0 - qh)
        if e > 0:
            out[(h, e - 1, 1)] = mu * qh * (1.0 - qe)
    return {s: r for s, r in out.items() if r > 0.0}


@dataclass(frozen=True)
class TruncationSpec:
    """Finite grid for the stationary solver.

    Transitions leaving the grid are dropped (reflecting truncation); the
    probability mass resting on the outermost shell is reported so callers
    can tell whether the grid was large enough.
    """

    h_max: int
    e_max: int = 0
    boundary: str = "reflect"

    def __post_init__(self) -> None:
        if not isinstance(self.h_max, int) or self.h_max < 1:
            raise ParamError("h_max must be an integer >= 1")
        if not isinstance(self.e_max, int) or self.e_max < 0:
            raise ParamError("e_max must be an integer >= 0")
        if self.boundary != "reflect":
            raise ParamError("only reflecting truncation is supported")


class RateQuery(Protocol):
    """A CTMC presented as neighbor rates over an enumerable truncated grid."""

    def states(self, trunc: TruncationSpec) -> List[State]: ...

    def transitions(self, s: State) -> Iterable[Tuple[State, float]]: ...

    def is_boundary(self, s: State, trunc: TruncationSpec) -> bool: ...

    def default_truncation(self) -> TruncationSpec: ...


def _theory_mean_h(p: MarketParams, policy: PolicyKind) -> float:
    """Rough stationary E[H] used to size default grids (not exported)."""
    lh, le = p.lambda_h, p.lambda_e
    if policy in (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT):
        reach_e = -math.expm1(p.d * math.log1p(-p.p_e)) if p.p_e < 1 else 1.0
        if le * reach_e > 0:
            return math.log(lh / (le * reach_e) + 1.0) / p.p_h
        # No E arrivals: segments start only via H bridges; the pool mean
        # stays O(log(1/p_h)/p_h), so size generously.
        return 2.0 * math.log(1.0 / p.p_h + 1.0) / p.p_h
    if regime(p) == Regime.H_MINORITY:
        return math.log(2.0 * le / (le - lh)) / (p.p_e * p.p_h)
    if regime(p) == Regime.H_MAJORITY:
        return math.log(2.0 * lh / (lh + le)) / (p.p_h * p.p_h)
    # Balanced markets sit between the regimes; bound by the wider of the two
    # one-sided guesses with lambda_e nudged.
    return math.log(4.0) / (p.p_e * p.p_h)


def default_truncation(policy: PolicyKind, p: MarketParams) -> TruncationSpec:
    """Grid comfortably past the stationary mass of the given policy.

    h_max is four times a first-order estimate of E[H]; e_max covers the
    E-queue, whose stationary tail decays at least geometrically with ratio
    1 - p_e**2 (so 8/p_e**2 standard scales suffice).
    """
    validate_params(p)
    h_max = max(40, math.ceil(4.0 * _theory_mean_h(p, policy)))
    if policy in (PolicyKind.CHAIN_HAT,):
        e_max = 0
    else:
        e_max = max(12, math.ceil(8.0 / (p.p_e * p.p_e)))
    return TruncationSpec(h_max=h_max, e_max=e_max)


class BilateralHQuery:
    """Counts-walk rates under H-priority bilateral matching."""

    policy = PolicyKind.BILATERAL_H

    def __init__(self, p: MarketParams):
        self.p = validate_params(p)

    def _rates(self, h: int, e: int) -> WalkRates:
        return _bilateral_h_rates(h, e, self.p)

    def states(self, trunc: TruncationSpec) -> List[State]:
        return [
            (h, e)
            for h in range(trunc.h_max + 1)
            for e in range(trunc.e_max + 1)
        ]

    def transitions(self, s: State) -> Iterable[Tuple[State, float]]:
        h, e = s
        r = self._rates(h, e)
        out = []
        if r.right > 0:
            out.append(((h + 1, e), r.right))
        if r.left > 0:
            out.append(((h - 1, e), r.left))
        if r.up > 0:
            out.append(((h, e + 1), r.up))
        if r.down > 0:
            out.append(((h, e - 1), r.down))
        return out

    def is_boundary(self, s: State, trunc: TruncationSpec) -> bool:
        h, e = s
        return h == trunc.h_max or (trunc.e_max > 0 and e == trunc.e_max)

    def default_truncation(self) -> TruncationSpec:
        return default_truncation(self.policy, self.p)


class BilateralEQuery(BilateralHQuery):
    """Counts-walk rates under E-priority bilateral matching."""

    policy = PolicyKind.BILATERAL_E

    def _rates(self, h: int, e: int) -> WalkRates:
        return _bilateral_e_rates(h, e, self.p)


class ChainHatQuery:
    """1-D chain rates for the strict chain policy (waiting H count only)."""

    policy = PolicyKind.CHAIN_HAT

    def __init__(self, p: MarketParams):
        self.p = validate_params(p)

    def states(self, trunc: TruncationSpec) -> List[State]:
        return list(range(trunc.h_max + 1))

    def transitions(self, s: State) -> Iterable[Tuple[State, float]]:
        return rates_chain_hat(s, self.p).items()

    def is_boundary(self, s: State, trunc: TruncationSpec) -> bool:
        return s == trunc.h_max

    def default_truncation(self) -> TruncationSpec:
        return default_truncation(self.policy, self.p)


class TokenChainQuery:
    """Token-passing chain rates on (h, e, token) states."""

    def __init__(self, p: MarketParams, mu: Optional[float] = None):
        self.p = validate_params(p)
        self.mu = default_token_service_rate(p) if mu is None else float(mu)
        if self.mu <= 0:
            raise ParamError("mu must be positive")

    def states(self, trunc: TruncationSpec) -> List[State]:
        return [
            (h, e, u)
            for h in range(trunc.h_max + 1)
            for e in range(trunc.e_max + 1)
            for u in (0, 1)
        ]

    def transitions(self, s: State) -> Iterable[Tuple[State, float]]:
        return rates_token_chain(s, self.p, self.mu).items()

    def is_boundary(self, s: State, trunc: TruncationSpec) -> bool:
        h, e, _ = s
        return h == trunc.h_max or (trunc.e_max > 0 and e == trunc.e_max)

    def default_truncation(self) -> TruncationSpec:
        lh, le = self.p.lambda_h, self.p.lambda_e
        miss_h = _pow(1.0 - self.p.p_h, self.p.d)
        start = lh * (1.0 - miss_h) + le
        h_mean = math.log((lh + le) / start) / self.p.p_h if start > 0 else 40.0
        h_max = max(40, math.ceil(4.0 * h_mean))
        e_max = max(12, math.ceil(8.0 / (self.p.p_e * self.p.p_e)))
        return TruncationSpec(h_max=h_max, e_max=e_max)


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary probabilities over a truncated grid.

    ``residual`` is the balance defect max |pi Q| of the *untruncated rows*
    of the generator restricted to the grid; ``boundary_mass`` is the
    probability resting on the outermost shell.
    """

    states: Tuple[State, ...]
    pi: np.ndarray = field(repr=False)
    residual: float
    boundary_mass: float

    def prob(self, s: State) -> float:
        try:
            return float(self.pi[self._index()[s]])
        except KeyError:
            return 0.0

    def _index(self) -> Dict[State, int]:
        idx = getattr(self, "_index_cache", None)
        if idx is None:
            idx = {s: i for i, s in enumerate(self.states)}
            object.__setattr__(self, "_index_cache", idx)
        return idx


def _build_generator(
    query: RateQuery, trunc: TruncationSpec
) -> Tuple[List[State], sp.csr_matrix]:
    states = query.states(trunc)
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    exit_rates = np.zeros(n)
    for i, s in enumerate(states):
        for t, r in query.transitions(s):
            if r <= 0.0:
                continue
            j = index.get(t)
            if j is None or j == i:
                continue  # moves off the grid are dropped (reflect)
            rows.append(i)
            cols.append(j)
            vals.append(r)
            exit_rates[i] += r
    rows.extend(range(n))
    cols.extend(range(n))
    vals.extend(-exit_rates)
    q = sp.csr_matrix(
        (np.asarray(vals), (np.asarray(rows), np.asarray(cols))), shape=(n, n)
    )
    return states, q


def _power_iteration(
    q: sp.csr_matrix, start: Optional[np.ndarray], tol: float, max_iters: int
) -> np.ndarray:
    n = q.shape[0]
    exit_rates = -q.diagonal()
    uni_rate = 1.01 * float(exit_rates.max())
    if uni_rate <= 0:
        raise ConvergenceError("generator has no transitions")
    p_mat = sp.eye(n, format="csr") + q * (1.0 / uni_rate)
    pi = np.full(n, 1.0 / n) if start is None else start.copy()
    pt = p_mat.T.tocsr()
    for _ in range(max_iters):
        nxt = pt @ pi
        total = nxt.sum()
        if total <= 0:
            raise ConvergenceError("power iteration lost all mass")
        nxt /= total
        change = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        if change < tol:
            return pi
    raise ConvergenceError(
        f"power iteration did not converge within {max_iters} iterations"
    )


def solve_stationary(
    query: RateQuery,
    trunc: Optional[TruncationSpec] = None,
    method: str = "direct",
    residual_tol: float = 1e-10,
    power_tol: float = 1e-13,
    max_iters: int = 10_000_000,
    boundary_tol: float = 1e-6,
    allow_boundary_mass: bool = False,
) -> StationaryDistribution:
    """Stationary distribution of a rate query on a truncated grid.

    ``method="direct"`` solves the balance equations with one equation
    replaced by normalization via a sparse LU factorization;
    ``method="power"`` uniformizes the generator (rate 1.01 times the largest
    exit rate) and iterates until successive sup-norm change is below
    ``power_tol``.  Either way the result must satisfy
    max |pi Q| <= residual_tol, and more than ``boundary_tol`` probability on
    the truncation shell raises unless ``allow_boundary_mass`` is set.
    """
    if trunc is None:
        trunc = query.default_truncation()
    states, q = _build_generator(query, trunc)
    n = len(states)
    qt = q.T.tocsr()
    if method == "direct":
        a = qt.tolil()
        a[n - 1, :] = 1.0
        b = np.zeros(n)
        b[n - 1] = 1.0
        pi = spla.spsolve(a.tocsr(), b)
        pi = np.maximum(pi, 0.0)
        s = pi.sum()
        if not np.isfinite(s) or s <= 0:
            raise ConvergenceError("direct stationary solve failed")
        pi /= s
        residual = float(np.max(np.abs(qt @ pi)))
        if residual > residual_tol:
            # Polish with a few uniformized sweeps before giving up.
            pi = _power_iteration(q, pi, power_tol, min(max_iters, 200_000))
            residual = float(np.max(np.abs(qt @ pi)))
    elif method == "power":
        pi = _power_iteration(q, None, power_tol, max_iters)
        residual = float(np.max(np.abs(qt @ pi)))
    else:
        raise ParamError(f"unknown stationary method: {method!r}")
    if residual > residual_tol:
        raise ConvergenceError(
            f"stationary residual {residual:.3e} exceeds {residual_tol:.1e}"
        )
    boundary = sum(
        float(pi[i]) for i, s in enumerate(states) if query.is_boundary(s, trunc)
    )
    if boundary > boundary_tol and not allow_boundary_mass:
        raise TruncationError(
            f"boundary mass {boundary:.3e} exceeds {boundary_tol:.1e}; "
            "enlarge the truncation grid"
        )
    return StationaryDistribution(
        states=tuple(states), pi=pi, residual=residual, boundary_mass=boundary
    )


def _state_counts(s: State) -> Tuple[int, int]:
    if isinstance(s, tuple):
        if len(s) >= 2:
            return int(s[0]), int(s[1])
        return int(s[0]), 0
    return int(s), 0


@dataclass(frozen=True)
class StationaryMoments:
    """Marginal count distributions and their means."""

    mean_h: float
    mean_e: float
    h_marginal: np.ndarray = field(repr=False)
    e_marginal: np.ndarray = field(repr=False)

    def tail_h(self, k: int) -> float:
        """P[H >= k]."""
        if k <= 0:
            return 1.0
        return float(self.h_marginal[min(k, len(self.h_marginal)) :].sum())

    def head_h(self, k: int) -> float:
        """P[H <= k]."""
        if k < 0:
            return 0.0
        return float(self.h_marginal[: k + 1].sum())

    def tail_e(self, k: int) -> float:
        """P[E >= k]."""
        if k <= 0:
            return 1.0
        return float(self.e_marginal[min(k, len(self.e_marginal)) :].sum())


def stationary_moments(dist: StationaryDistribution) -> StationaryMoments:
    """Means and marginals of the waiting counts under a stationary law."""
    counts = [_state_counts(s) for s in dist.states]
    h_max = max(c[0] for c in counts)
    e_max = max(c[1] for c in counts)
    h_marg = np.zeros(h_max + 1)
    e_marg = np.zeros(e_max + 1)
    for (h, e), mass in zip(counts, dist.pi):
        h_marg[h] += mass
        e_marg[e] += mass
    mean_h = float(np.arange(h_max + 1) @ h_marg)
    mean_e = float(np.arange(e_max + 1) @ e_marg)
    return StationaryMoments(
        mean_h=mean_h, mean_e=mean_e, h_marginal=h_marg, e_marginal=e_marg
    )


def expected_chain_length_stationary(
    p: MarketParams,
    trunc: Optional[TruncationSpec] = None,
    method: str = "direct",
) -> float:
    """Stationary mean segment length of the strict chain policy.

    Averages 1 + E[S_h] over the stationary law of the waiting H count under
    the strict chain policy (segment-start probability does not depend on h,
    so this is the mean length conditioned on a segment forming).
    """
    query = ChainHatQuery(p)
    dist = solve_stationary(query, trunc, method=method)
    total = 0.0
    for h, mass in zip(dist.states, dist.pi):
        if mass <= 0.0:
            continue
        total += mass * (1.0 + chain_seg_pmf(int(h), p.p_h).mean())
    return total


def chain_flow_balance_length(p: MarketParams, policy: PolicyKind) -> float:
    """Exact stationary mean segment length from conservation of agents.

    In steady state the rate at which agents join the waiting pools equals
    the rate at which segments remove them, so the mean number removed per
    segment is (joining rate)/(segment rate), and the mean segment length is
    that plus one (the arrival that starts the segment).
    """
    validate_params(p)
    seg_rate = _chain_seg_start_rate(p)
    if seg_rate <= 0:
        raise ParamError("segments never form at these parameters")
    join_h = p.lambda_h * _pow(1.0 - p.p_h, p.d)
    join_e = p.lambda_e * _pow(1.0 - p.p_e, p.d)
    if policy == PolicyKind.CHAIN:
        joining = join_h + join_e
    elif policy == PolicyKind.CHAIN_HAT:
        joining = join_h
    else:
        raise ParamError("flow-balance length applies to chain policies only")
    return joining / seg_rate + 1.0
