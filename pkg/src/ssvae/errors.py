"""Exception types raised across the package."""


class SSVAEError(Exception):
    """Base class for all package errors."""


class ValidationError(SSVAEError, ValueError):
    """A table or parameter failed construction-time validation."""


class ZeroMarginal(SSVAEError):
    """Conditioning on a label whose marginal probability is zero."""

    def __init__(self, label):
        super().__init__(f"marginal probability of {label!r} is zero")
        self.label = label


class AbsoluteContinuity(SSVAEError):
    """p puts mass on a label where q has none."""

    def __init__(self, label):
        super().__init__(f"p > 0 but q = 0 at {label!r}")
        self.label = label


class UnreachedLatent(SSVAEError):
    """A latent label has zero induced marginal probability."""

    def __init__(self, label):
        super().__init__(f"induced marginal of latent {label!r} is zero")
        self.label = label


class NonConvergence(SSVAEError):
    """An optimizer hit its iteration cap before the gradient tolerance."""

    def __init__(self, max_iters, grad_norm, trace=None, result=None):
        super().__init__(
            f"no convergence after {max_iters} iterations "
            f"(gradient max-norm {grad_norm:.3e})"
        )
        self.max_iters = max_iters
        self.grad_norm = grad_norm
        self.trace = trace
        self.result = result


class SpecError(SSVAEError):
    """A model-spec file could not be parsed or validated."""
