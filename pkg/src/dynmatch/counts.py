"""Discrete-event simulation of the matching policies on waiting counts.

All policies simulated here make decisions that depend on the market only
through the waiting counts (h, e), so each arrival epoch is a single draw
from the exact step law.  Coin order within an epoch is fixed and documented
(arrival-type coin, then match coins in the policy's priority order, with
zero-probability coins skipped), which makes trajectories bit-reproducible
for a given seed and lets the chain policy and its strict variant share one
code path.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Dict, Literal, Optional, Tuple

import numpy as np

from .core import (
    COUNTS_POLICIES,
    CountsState,
    MarketParams,
    ParamError,
    PolicyKind,
    RunControls,
    SimSummary,
    T_QUANTILE_975_DF19,
    little_law,
    replica_seeds,
    validate_controls,
    validate_params,
)
from .ctmc import ChainSegDist, chain_seg_pmf

__all__ = [
    "StepEvent",
    "CoupledTrace",
    "replica_rng",
    "step_bilateral_h",
    "step_bilateral_e",
    "step_chain",
    "step_chain_hat",
    "step_bilateral_e_tilde",
    "step_policy",
    "run_replica",
    "run_coupled_chain",
    "run_coupled_bilateral_e",
]


@dataclass(frozen=True)
class StepEvent:
    """Outcome of one arrival epoch.

    ``chain_len`` is the segment length (matched agents including the
    arrival) when a chain segment formed, else 0; it is only ever positive
    for chain policies and implies ``matched``.
    """

    arrival_type: Literal["H", "E"]
    matched: bool
    chain_len: int


def replica_rng(base_seed: int, replica: int = 0) -> random.Random:
    """The scalar generator for one replica of a counts run."""
    return random.Random(replica_seeds(base_seed, replica + 1)[replica])


# A kernel maps (h, e, random()-callable) to
# (h', e', matched, arrival_is_h, chain_len) using plain ints.
Kernel = Callable[[int, int, Callable[[], float]], Tuple[int, int, int, int, int]]


def _make_kernel(policy: PolicyKind, p: MarketParams) -> Kernel:
    """Compile the step law of one policy with all probabilities prebound."""
    validate_params(p)
    total = p.lambda_h + p.lambda_e
    a_h = p.lambda_h / total  # probability the next arrival is type H
    q_hh = 1.0 - p.p_h * p.p_h
    q_eh = 1.0 - p.p_e * p.p_h
    q_ee = 1.0 - p.p_e * p.p_e
    q_h = 1.0 - p.p_h
    q_e = 1.0 - p.p_e
    miss_h = q_h**p.d  # arrival misses every bridge
    miss_e = q_e**p.d

    if policy == PolicyKind.BILATERAL_H:

        def kernel(h: int, e: int, rnd: Callable[[], float]):
            if rnd() < a_h:
                if h and rnd() < 1.0 - q_hh**h:
                    return h - 1, e, 1, 1, 0
                if e and rnd() < 1.0 - q_eh**e:
                    return h, e - 1, 1, 1, 0
                return h + 1, e, 0, 1, 0
            if h and rnd() < 1.0 - q_eh**h:
                return h - 1, e, 1, 0, 0
            if e and rnd() < 1.0 - q_ee**e:
                return h, e - 1, 1, 0, 0
            return h, e + 1, 0, 0, 0

        return kernel

    if policy == PolicyKind.BILATERAL_E:

        def kernel(h: int, e: int, rnd: Callable[[], float]):
            if rnd() < a_h:
                if e and rnd() < 1.0 - q_eh**e:
                    return h, e - 1, 1, 1, 0
                if h and rnd() < 1.0 - q_hh**h:
                    return h - 1, e, 1, 1, 0
                return h + 1, e, 0, 1, 0
            if e and rnd() < 1.0 - q_ee**e:
                return h, e - 1, 1, 0, 0
            if h and rnd() < 1.0 - q_eh**h:
                return h - 1, e, 1, 0, 0
            return h, e + 1, 0, 0, 0

        return kernel

    if policy == PolicyKind.BILATERAL_E_TILDE:

        def kernel(h: int, e: int, rnd: Callable[[], float]):
            # Unmatched E arrivals convert: the single pool is matched with
            # probability p_h*p_h (H arrivals) or p_e*p_h (E arrivals).
            if rnd() < a_h:
                if h and rnd() < 1.0 - q_hh**h:
                    return h - 1, e, 1, 1, 0
                return h + 1, e, 0, 1, 0
            if h and rnd() < 1.0 - q_eh**h:
                return h - 1, e, 1, 0, 0
            return h + 1, e, 0, 0, 0

        return kernel

    if policy in (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT):
        keep_e = policy == PolicyKind.CHAIN

        def kernel(h: int, e: int, rnd: Callable[[], float]):
            if rnd() < a_h:
                arrival_h = 1
                miss = miss_h
            else:
                arrival_h = 0
                miss = miss_e
            if rnd() < miss:
                if arrival_h:
                    return h + 1, e, 0, 1, 0
                if keep_e:
                    return h, e + 1, 0, 0, 0
                return h, e, 0, 0, 0  # strict variant: unmatched E leaves
            # A segment forms: sweep waiting H first, then E, repeatedly.
            removed = 0
            while True:
                if h and rnd() < 1.0 - q_h**h:
                    h -= 1
                    removed += 1
                    continue
                if keep_e and e and rnd() < 1.0 - q_e**e:
                    e -= 1
                    removed += 1
                    continue
                break
            return h, e, 1, arrival_h, removed + 1

        return kernel

    raise ParamError(f"{policy.value} is not a counts policy; use the graph engine")


def _step(policy: PolicyKind, s: CountsState, p: MarketParams, rng: random.Random):
    if s.h < 0 or s.e < 0:
        raise ParamError("counts must be nonnegative")
    h, e, matched, arrival_h, chain_len = _make_kernel(policy, p)(s.h, s.e, rng.random)
    event = StepEvent(
        arrival_type="H" if arrival_h else "E",
        matched=bool(matched),
        chain_len=chain_len,
    )
    return CountsState(h, e), event


def step_bilateral_h(s: CountsState, p: MarketParams, rng: random.Random):
    """One arrival epoch under bilateral matching, H partners first."""
    return _step(PolicyKind.BILATERAL_H, s, p, rng)


def step_bilateral_e(s: CountsState, p: MarketParams, rng: random.Random):
    """One arrival epoch under bilateral matching, E partners first."""
    return _step(PolicyKind.BILATERAL_E, s, p, rng)


def step_chain(s: CountsState, p: MarketParams, rng: random.Random):
    """One arrival epoch under the chain policy."""
    return _step(PolicyKind.CHAIN, s, p, rng)


def step_chain_hat(s: CountsState, p: MarketParams, rng: random.Random):
    """One arrival epoch under the strict chain policy (E never waits)."""
    return _step(PolicyKind.CHAIN_HAT, s, p, rng)


def step_bilateral_e_tilde(s: CountsState, p: MarketParams, rng: random.Random):
    """One arrival epoch with unmatched E arrivals converting to hard type."""
    return _step(PolicyKind.BILATERAL_E_TILDE, s, p, rng)


def step_policy(
    policy: PolicyKind, s: CountsState, p: MarketParams, rng: random.Random
):
    """One arrival epoch under any counts policy."""
    return _step(policy, s, p, rng)


def _batch_layout(rc: RunControls) -> Tuple[int, int]:
    """(epochs to skip, batch size) for 20 batch means after warmup."""
    warmup = int(rc.arrivals * rc.warmup_fraction)
    post = rc.arrivals - warmup
    m = post // 20
    if m < 1:
        raise ParamError(
            "arrivals too small: need at least 20 post-warmup epochs for batch means"
        )
    return rc.arrivals - 20 * m, m


def _ci_half_width(batch_means: np.ndarray) -> float:
    spread = float(batch_means.std(ddof=1))
    return T_QUANTILE_975_DF19 * spread / math.sqrt(len(batch_means))


def run_replica(
    policy: PolicyKind,
    p: MarketParams,
    rc: RunControls,
    rng: Optional[random.Random] = None,
    replica: int = 0,
) -> SimSummary:
    """Simulate one replica from the empty market and average after warmup.

    The run starts at (0, 0), discards the first ``warmup_fraction`` of
    arrivals (plus a remainder of at most 19 epochs so the averaging window
    splits into 20 equal batches), and reports post-warmup mean counts,
    waiting times via Little's law, and — for chain policies — the mean
    segment length over epochs where a segment formed.  For the converting
    policy (unmatched E becomes hard to match) ``mean_h`` counts the single
    pooled queue and ``w_h`` still divides by ``lambda_h`` by convention.
    """
    validate_params(p)
    validate_controls(rc)
    if policy not in COUNTS_POLICIES:
        raise ParamError(f"{policy.value} is not a counts policy; use the graph engine")
    if rng is None:
        rng = replica_rng(rc.seed, replica)
    skip, m = _batch_layout(rc)
    kernel = _make_kernel(policy, p)
    rnd = rng.random
    h = e = 0
    for _ in range(skip):
        h, e, _m, _a, _c = kernel(h, e, rnd)
    batch_h = np.empty(20)
    batch_e = np.empty(20)
    seg_count = 0
    seg_len_total = 0
    for b in range(20):
        acc_h = 0
        acc_e = 0
        for _ in range(m):
            h, e, _matched, _ah, clen = kernel(h, e, rnd)
            acc_h += h
            acc_e += e
            if clen:
                seg_count += 1
                seg_len_total += clen
        batch_h[b] = acc_h / m
        batch_e[b] = acc_e / m
    mean_h = float(batch_h.mean())
    mean_e = float(batch_e.mean())
    is_chain = policy in (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT)
    chain_mean = seg_len_total / seg_count if is_chain and seg_count else None
    return SimSummary(
        mean_h=mean_h,
        mean_e=mean_e,
        w_h=little_law(mean_h, p.lambda_h),
        w_e=little_law(mean_e, p.lambda_e) if p.lambda_e > 0 else 0.0,
        chain_len_mean_given_positive=chain_mean,
        ci_half_width_h=_ci_half_width(batch_h),
        ci_half_width_e=_ci_half_width(batch_e),
        samples=20 * m,
    )


@dataclass(frozen=True)
class CoupledTrace:
    """Per-epoch states of two policies driven by shared randomness.

    Leg a is the richer policy (chain, or E-priority bilateral); leg b is its
    dominating relaxation (strict chain, or the converting bilateral).
    ``violation_count`` counts epochs whose states break the intended
    dominance (h_a <= h_b for chains; h_a + e_a <= h_b + 1 for bilateral).
    """

    policy_a: PolicyKind
    policy_b: PolicyKind
    h_a: np.ndarray
    e_a: np.ndarray
    h_b: np.ndarray
    violation_count: int


class _SegCache:
    """Memoized segment-size distributions keyed by pool size."""

    def __init__(self, p_h: float):
        self.p_h = p_h
        self._cache: Dict[int, ChainSegDist] = {}

    def get(self, h: int) -> ChainSegDist:
        dist = self._cache.get(h)
        if dist is None:
            dist = chain_seg_pmf(h, self.p_h)
            self._cache[h] = dist
        return dist


def _sample_truncated_seg(
    dist: ChainSegDist, below: int, u: float
) -> int:
    """Sample S | S < below by inverting the cdf with uniform u."""
    norm = 1.0 - dist.tail(below)
    target = u * norm
    acc = 0.0
    for i in range(below):
        acc += float(dist.pmf[i])
        if target < acc:
            return i
    return below - 1  # guard against roundoff at the right edge


def run_coupled_chain(
    p: MarketParams,
    rc: RunControls,
    rng: Optional[random.Random] = None,
) -> CoupledTrace:
    """Drive the chain policy and its strict variant on shared randomness.

    Both legs see the same arrival types and bridge coins.  When a segment
    forms, the strict leg's extra waiting agents (h_b - h_a of them) are
    swept first: with the exact probability that its sweep survives them,
    both legs then share one H-sweep over the a-leg's pool; otherwise the
    strict leg draws from its sweep law conditioned on dying early while the
    a-leg sweeps independently.  Each leg's marginal law is exactly its
    policy's law, and the construction keeps h_a <= h_b pathwise.
    """
    validate_params(p)
    validate_controls(rc)
    if rng is None:
        rng = replica_rng(rc.seed, 0)
    rnd = rng.random
    total = p.lambda_h + p.lambda_e
    a_h = p.lambda_h / total
    q_h = 1.0 - p.p_h
    q_e = 1.0 - p.p_e
    miss_h = q_h**p.d
    miss_e = q_e**p.d
    cache = _SegCache(p.p_h)
    t_max = rc.arrivals
    h_a = np.empty(t_max, dtype=np.int64)
    e_a = np.empty(t_max, dtype=np.int64)
    h_b = np.empty(t_max, dtype=np.int64)
    ha = ea = hb = 0
    violations = 0
    for t in range(t_max):
        arrival_h = rnd() < a_h
        if rnd() < (miss_h if arrival_h else miss_e):
            # No bridge edge: H joins both legs; E joins only the a-leg.
            if arrival_h:
                ha += 1
                hb += 1
            else:
                ea += 1
        else:
            delta = hb - ha
            shared = True
            if delta > 0:
                shared = rnd() < cache.get(hb).tail(delta)
            if shared:
                # One H-sweep serves both legs (strict leg already cleared
                # its extra delta agents by surviving them).
                hh = ha
                while hh and rnd() < 1.0 - q_h**hh:
                    hh -= 1
                hb = hh
                # The a-leg may continue through waiting E agents.
                aa_h, aa_e = hh, ea
                while True:
                    if aa_e and rnd() < 1.0 - q_e**aa_e:
                        aa_e -= 1
                        while aa_h and rnd() < 1.0 - q_h**aa_h:
                            aa_h -= 1
                        continue
                    break
                ha, ea = aa_h, aa_e
            else:
                # Strict leg dies among its extra agents; a-leg is untouched
                # by that event and sweeps independently.
                hb -= _sample_truncated_seg(cache.get(hb), delta, rnd())
                aa_h, aa_e = ha, ea
                while True:
                    if aa_h and rnd() < 1.0 - q_h**aa_h:
                        aa_h -= 1
                        continue
                    if aa_e and rnd() < 1.0 - q_e**aa_e:
                        aa_e -= 1
                        continue
                    break
                ha, ea = aa_h, aa_e
        if ha > hb:
            violations += 1
        h_a[t] = ha
        e_a[t] = ea
        h_b[t] = hb
    return CoupledTrace(
        policy_a=PolicyKind.CHAIN,
        policy_b=PolicyKind.CHAIN_HAT,
        h_a=h_a,
        e_a=e_a,
        h_b=h_b,
        violation_count=violations,
    )


def run_coupled_bilateral_e(
    p: MarketParams,
    rc: RunControls,
    rng: Optional[random.Random] = None,
) -> CoupledTrace:
    """Drive E-priority bilateral and its converting relaxation together.

    While the pooled counts are close (h_b <= h_a + e_a <= h_b + 1) the legs
    share coins chosen so that whenever the converting leg matches, the
    E-priority leg matches too; otherwise the legs step independently.  Each
    leg's marginal law is exact, and the shared-coin phase keeps
    h_a + e_a <= h_b + 1 pathwise.
    """
    validate_params(p)
    validate_controls(rc)
    if p.p_h >= 1.0:
        raise ParamError("the bilateral coupling requires p_h < 1")
    if rng is None:
        rng = replica_rng(rc.seed, 0)
    rnd = rng.random
    total = p.lambda_h + p.lambda_e
    a_h = p.lambda_h / total
    q_hh = 1.0 - p.p_h * p.p_h
    q_eh = 1.0 - p.p_e * p.p_h
    q_ee = 1.0 - p.p_e * p.p_e
    kernel_a = _make_kernel(PolicyKind.BILATERAL_E, p)
    kernel_b = _make_kernel(PolicyKind.BILATERAL_E_TILDE, p)
    t_max = rc.arrivals
    h_a = np.empty(t_max, dtype=np.int64)
    e_a = np.empty(t_max, dtype=np.int64)
    h_b = np.empty(t_max, dtype=np.int64)
    ha = ea = hb = 0
    violations = 0
    for t in range(t_max):
        arrival_h = rnd() < a_h
        if hb <= ha + ea <= hb + 1:
            if arrival_h:
                keep_b = rnd() < q_hh**hb
                keep_extra = rnd() < q_hh ** (ha - hb) * q_eh**ea
                hb = hb + 1 if keep_b else hb - 1
                if keep_b and keep_extra:
                    ha += 1
                else:
                    # a-leg matched; E partner with the exact conditional odds
                    match_e = (1.0 - q_eh**ea) / (1.0 - q_hh**ha * q_eh**ea)
                    if rnd() < match_e:
                        ea -= 1
                    else:
                        ha -= 1
            else:
                keep_b = rnd() < q_eh**hb
                keep_extra = rnd() < q_eh ** (ha - hb) * q_ee**ea
                hb = hb + 1 if keep_b else hb - 1
                if keep_b and keep_extra:
                    ea += 1
                else:
                    match_e = (1.0 - q_ee**ea) / (1.0 - q_eh**ha * q_ee**ea)
                    if rnd() < match_e:
                        ea -= 1
                    else:
                        ha -= 1
        else:
            ha, ea, _m, _ah, _c = _forced_arrival(kernel_a, ha, ea, arrival_h, rnd)
            hb, _e, _m2, _ah2, _c2 = _forced_arrival(kernel_b, hb, 0, arrival_h, rnd)
        if ha + ea > hb + 1:
            violations += 1
        h_a[t] = ha
        e_a[t] = ea
        h_b[t] = hb
    return CoupledTrace(
        policy_a=PolicyKind.BILATERAL_E,
        policy_b=PolicyKind.BILATERAL_E_TILDE,
        h_a=h_a,
        e_a=e_a,
        h_b=h_b,
        violation_count=violations,
    )


def _forced_arrival(
    kernel: Kernel, h: int, e: int, arrival_h: bool, rnd: Callable[[], float]
):
    """Run a kernel whose arrival type has already been drawn."""
    # Feed the kernel a fake first uniform that reproduces the chosen type.
    taken = [False]

    def wrapped() -> float:
        if not taken[0]:
            taken[0] = True
            return 0.0 if arrival_h else 1.0
        return rnd()

    return kernel(h, e, wrapped)
