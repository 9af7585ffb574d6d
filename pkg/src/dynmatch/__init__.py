"""Simulation and numerical analysis of dynamic matching markets.

Agents that are hard to match (H) and easy to match (E) arrive over time and
are matched by myopic bilateral or chain policies.  The package provides:

- ``counts``: fast exact simulation of the policies on waiting counts;
- ``graphsim``: an agent-level engine with explicit compatibility graphs,
  including an exhaustive maximum-chain-segment policy;
- ``ctmc``: exact transition rates and truncated stationary solvers;
- ``theory``: closed-form waiting-time limits, drift fixed points, and
  generic exponential tail bounds;
- ``experiments`` / ``cli``: reproducible experiment presets with CSV output.
"""

from .core import (
    CountsState,
    MarketParams,
    PolicyKind,
    Regime,
    RunControls,
    SimSummary,
    little_law,
    regime,
    validate_params,
)

__version__ = "0.1.0"

__all__ = [
    "CountsState",
    "MarketParams",
    "PolicyKind",
    "Regime",
    "RunControls",
    "SimSummary",
    "little_law",
    "regime",
    "validate_params",
    "__version__",
]
