"""Tabular workbench for Conservative Peng's Q(lambda) on finite MDPs."""

__version__ = "0.1.0"

from cpqlbench.errors import (
    ConvergenceError,
    InvariantError,
    SupportViolation,
)
from cpqlbench.mdp_core import (
    FiniteMdp,
    TabularPolicy,
    VisitDist,
    expected_return,
    greedy_policy,
    mixture_policy,
    policy_evaluation_exact,
    total_variation,
    two_state_toggle,
    value_iteration,
    visitation_distribution,
)

__all__ = [
    "ConvergenceError",
    "FiniteMdp",
    "InvariantError",
    "SupportViolation",
    "TabularPolicy",
    "VisitDist",
    "expected_return",
    "greedy_policy",
    "mixture_policy",
    "policy_evaluation_exact",
    "total_variation",
    "two_state_toggle",
    "value_iteration",
    "visitation_distribution",
]
