class InvariantError(ValueError):
    """Raised when an MDP, policy, dataset or config violates its invariants."""


class SupportViolation(ValueError):
    """A policy puts mass on an action the behavior policy never takes."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""
