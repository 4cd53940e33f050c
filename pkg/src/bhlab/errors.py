"""Exception hierarchy shared by all modules."""


class BHLabError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(BHLabError, ValueError):
    """Invalid law, config file, or numerical parameter."""


class DomainError(BHLabError, IndexError):
    """A site or space-time point lies outside the region it was asked about."""


class TruncationError(BHLabError):
    """A walk reached the edge of the stored environment box."""


class NonConvergenceError(BHLabError):
    """An iterative solve hit ``max_iters`` before reaching its tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class RateFitError(BHLabError, ValueError):
    """Too few usable ladder points for a rate fit."""
