"""Shared types, parameter validation, and small statistical helpers.

The market model: two agent types arrive over time, hard-to-match (H) and
easy-to-match (E).  H agents arrive at rate ``lambda_h``, E agents at rate
``lambda_e``.  When a new agent arrives, each ordered pair (existing -> new)
and (new -> existing) independently forms a directed compatibility edge; the
probability that an agent can *receive* from another is ``p_h`` if the
receiver is hard to match and ``p_e`` if the receiver is easy to match,
with ``p_h <= p_e``.  Chain policies additionally keep ``d`` bridge agents
(altruistic item holders) in the market.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "MarketParams",
    "CountsState",
    "RunControls",
    "SimSummary",
    "PolicyKind",
    "Regime",
    "ParamError",
    "ConfigError",
    "ConvergenceError",
    "TruncationError",
    "SearchBudgetError",
    "BoundConditionError",
    "validate_params",
    "validate_controls",
    "little_law",
    "regime",
    "replica_sequences",
    "replica_seeds",
    "batch_mean_ci",
]


class ParamError(ValueError):
    """A model parameter or run control is outside its legal range."""


class ConfigError(ParamError):
    """An experiment configuration file is malformed."""


class ConvergenceError(RuntimeError):
    """An iterative numerical routine failed to reach its tolerance."""


class TruncationError(RuntimeError):
    """A truncated state space left too much probability on its boundary."""


class SearchBudgetError(RuntimeError):
    """An exhaustive search exceeded its node-expansion budget."""


class BoundConditionError(ValueError):
    """A hypothesis of a tail-bound construction fails on the given inputs."""


class Regime(Enum):
    """Which side of the market is scarce."""

    H_MINORITY = "h_minority"  # lambda_h < lambda_e
    H_MAJORITY = "h_majority"  # lambda_h > lambda_e
    BALANCED = "balanced"  # lambda_h == lambda_e


class PolicyKind(Enum):
    """Matching policy tags understood by the simulation engines.

    ``BILATERAL_H``: match the new agent in a two-way exchange, trying H
    partners before E partners.  ``BILATERAL_E``: same but E partners first.
    ``CHAIN``: extend a chain segment from a bridge agent through waiting
    agents, H before E at every step; the last agent becomes the new bridge.
    ``CHAIN_HAT``: like ``CHAIN`` except an E arrival that cannot join a
    segment immediately leaves the market.  ``BILATERAL_E_TILDE``: like
    ``BILATERAL_E`` except an unmatched E arrival stays but becomes hard to
    match.  ``MAX_CHAINS``: graph engine only; per arrival, select the chain
    segment maximizing (number of H agents, length) lexicographically.

    Chain policies read the segment fan-out ``d`` from ``MarketParams.d``.
    """

    BILATERAL_H = "bilateral_h"
    BILATERAL_E = "bilateral_e"
    CHAIN = "chain"
    CHAIN_HAT = "chain_hat"
    BILATERAL_E_TILDE = "bilateral_e_tilde"
    MAX_CHAINS = "max_chains"


#: Policies whose step law depends only on the waiting counts (h, e).
COUNTS_POLICIES = (
    PolicyKind.BILATERAL_H,
    PolicyKind.BILATERAL_E,
    PolicyKind.CHAIN,
    PolicyKind.CHAIN_HAT,
    PolicyKind.BILATERAL_E_TILDE,
)

#: Policies that form chain segments (report a segment length per match).
CHAIN_POLICIES = (PolicyKind.CHAIN, PolicyKind.CHAIN_HAT, PolicyKind.MAX_CHAINS)


@dataclass(frozen=True)
class MarketParams:
    """Arrival rates, compatibility probabilities, and bridge count.

    ``d`` is only read by chain policies; bilateral policies ignore it.
    """

    lambda_h: float
    lambda_e: float
    p_h: float
    p_e: float
    d: int = 1


@dataclass(frozen=True)
class CountsState:
    """Waiting-agent counts (h hard-to-match, e easy-to-match)."""

    h: int
    e: int


@dataclass(frozen=True)
class RunControls:
    """Length, warmup, and seeding of a simulation run.

    ``arrivals`` counts arriving agents (initial bridge agents excluded).
    The first ``warmup_fraction`` of arrivals is discarded before averaging.
    ``seed`` is the base seed; replica streams are derived from it so that
    distinct replica indices never share a stream.
    """

    arrivals: int
    warmup_fraction: float = 0.5
    seed: int = 0
    replicas: int = 1


@dataclass(frozen=True)
class SimSummary:
    """Post-warmup averages of one simulation replica.

    ``w_h`` and ``w_e`` are waiting times obtained from the mean counts via
    Little's law.  When ``lambda_e == 0`` there are no E arrivals and ``w_e``
    is reported as 0.0.  ``chain_len_mean_given_positive`` is the mean chain
    segment length over epochs in which a segment formed (None for bilateral
    policies).  ``ci_half_width_h`` / ``ci_half_width_e`` are 95% half-widths
    for ``mean_h`` / ``mean_e`` from 20 batch means; ``samples`` is the
    number of post-warmup epochs those statistics average over.
    """

    mean_h: float
    mean_e: float
    w_h: float
    w_e: float
    chain_len_mean_given_positive: Optional[float]
    ci_half_width_h: float
    ci_half_width_e: float
    samples: int


def validate_params(p: MarketParams) -> MarketParams:
    """Check model parameters, returning them unchanged if legal."""
    if not (isinstance(p.lambda_h, (int, float)) and math.isfinite(p.lambda_h)):
        raise ParamError("lambda_h must be a finite number")
    if not (isinstance(p.lambda_e, (int, float)) and math.isfinite(p.lambda_e)):
        raise ParamError("lambda_e must be a finite number")
    if p.lambda_h <= 0:
        raise ParamError("lambda_h must be positive")
    if p.lambda_e < 0:
        raise ParamError("lambda_e must be nonnegative")
    if not (0 < p.p_h <= 1):
        raise ParamError("p_h must lie in (0, 1]")
    if not (0 < p.p_e <= 1):
        raise ParamError("p_e must lie in (0, 1]")
    if p.p_h > p.p_e:
        raise ParamError("p_h must not exceed p_e")
    if not isinstance(p.d, int) or isinstance(p.d, bool) or p.d < 1:
        raise ParamError("d must be an integer >= 1")
    return p


def validate_controls(rc: RunControls) -> RunControls:
    """Check run controls, returning them unchanged if legal."""
    if not isinstance(rc.arrivals, int) or rc.arrivals < 2:
        raise ParamError("arrivals must be an integer >= 2")
    if not (0 <= rc.warmup_fraction < 1):
        raise ParamError("warmup_fraction must lie in [0, 1)")
    if not isinstance(rc.seed, int) or not (0 <= rc.seed < 2**64):
        raise ParamError("seed must be an integer in [0, 2**64)")
    if not isinstance(rc.replicas, int) or rc.replicas < 1:
        raise ParamError("replicas must be an integer >= 1")
    return rc


def little_law(mean_count: float, rate: float) -> float:
    """Mean waiting time implied by a mean queue length and an arrival rate."""
    if rate <= 0:
        raise ParamError("rate must be positive")
    return mean_count / rate


def regime(p: MarketParams) -> Regime:
    """Classify the market by which type is scarce."""
    if p.lambda_h < p.lambda_e:
        return Regime.H_MINORITY
    if p.lambda_h > p.lambda_e:
        return Regime.H_MAJORITY
    return Regime.BALANCED


def replica_sequences(base_seed: int, replicas: int) -> List[np.random.SeedSequence]:
    """Independent child seed sequences, one per replica index.

    Children are spawned from ``SeedSequence(base_seed)``, so replica ``i``
    always receives the same stream for a given base seed and different
    replicas never collide.
    """
    if replicas < 1:
        raise ParamError("replicas must be an integer >= 1")
    return np.random.SeedSequence(base_seed).spawn(replicas)


def replica_seeds(base_seed: int, replicas: int) -> List[int]:
    """128-bit integer seeds for ``random.Random``, one per replica index."""
    out = []
    for ss in replica_sequences(base_seed, replicas):
        words = ss.generate_state(4, dtype=np.uint32)
        out.append(int.from_bytes(words.tobytes(), "little"))
    return out


# 97.5% Student-t quantile with 19 degrees of freedom, for 20 batch means.
T_QUANTILE_975_DF19 = 2.093024054408263


def batch_mean_ci(values: Sequence[float], batches: int = 20) -> Tuple[float, float]:
    """Mean and 95% CI half-width of a correlated series via batch means.

    The series is split into ``batches`` equal batches covering its last
    ``batches * (len(values) // batches)`` entries (a short remainder at the
    start is dropped so every batch has the same size).  The returned mean is
    taken over exactly the batched window, so the half-width refers to it.
    """
    n = len(values)
    m = n // batches
    if m < 1:
        raise ParamError(
            f"series of length {n} is too short for {batches} batch means"
        )
    arr = np.asarray(values, dtype=float)[n - batches * m :]
    means = arr.reshape(batches, m).mean(axis=1)
    grand = float(means.mean())
    if batches < 2:
        return grand, 0.0
    spread = float(means.std(ddof=1))
    half = T_QUANTILE_975_DF19 * spread / math.sqrt(batches)
    if batches != 20:
        # General quantile only needed off the default path.
        from scipy.stats import t as student_t

        half = float(student_t.ppf(0.975, batches - 1)) * spread / math.sqrt(batches)
    return grand, half
