"""
Exception types shared by the scheduler modules.
"""


class ModelDomainError(ValueError):
    """Raised for inputs outside the model's domain (negative bits, zero channels, bad shapes)."""


class InfeasibleProblemError(RuntimeError):
    """Raised when a requested scheme has no feasible schedule."""


class ResidualInvariantError(RuntimeError):
    """Raised when an online residual backlog turns negative beyond tolerance."""


class TrialTimeoutError(RuntimeError):
    """Raised when a solve runs past the deadline of its Monte-Carlo trial."""
