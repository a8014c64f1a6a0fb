"""Exception types raised across the package.

Most derive from ValueError so that generic input-validation handling keeps
working; the few that signal internal numerical failure derive from
RuntimeError instead.
"""


class FracpinnError(Exception):
    """Base class for all package-specific errors."""


# --- quadrature ---------------------------------------------------------


class InvalidExponent(FracpinnError, ValueError):
    """Weight exponent <= -1: the weight function is not integrable."""


class DegenerateRule(FracpinnError, RuntimeError):
    """The Golub-Welsch eigen-solve failed or produced an invalid rule.

    This signals a numerics bug, not a user error.
    """


class LambdaNonPositive(FracpinnError, ValueError):
    """A tempering factor that must be strictly positive was <= 0."""


# --- sampling ------------------------------------------------------------


class NonPositiveShape(FracpinnError, ValueError):
    pass


class NonPositiveRate(FracpinnError, ValueError):
    pass


class DimensionUnsupported(FracpinnError, ValueError):
    """Requested dimension exceeds the Sobol direction-number table."""


# --- operators -----------------------------------------------------------


class ConfigMismatch(FracpinnError, ValueError):
    """Estimator called with an operator config it does not handle."""


class RuleMismatch(FracpinnError, ValueError):
    """Radial rule parameters disagree with the operator config."""


class NonPositiveTime(FracpinnError, ValueError):
    pass


class GammaOutOfRange(FracpinnError, ValueError):
    pass


class AlphaOutOfRange(FracpinnError, ValueError):
    pass


# --- network -------------------------------------------------------------


class BadShape(FracpinnError, ValueError):
    pass


# --- training ------------------------------------------------------------


class ShapeMismatch(FracpinnError, ValueError):
    pass


class NonFiniteLoss(FracpinnError, RuntimeError):
    """Training diverged. Carries the epoch, learning rate and last loss."""

    def __init__(self, epoch: int, lr: float, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch} (lr={lr:.3e})"
        )
        self.epoch = epoch
        self.lr = lr
        self.loss = loss


# --- problems ------------------------------------------------------------


class DimensionMismatch(FracpinnError, ValueError):
    pass


class OutsideDomain(FracpinnError, ValueError):
    pass


class ZeroReference(FracpinnError, ValueError):
    """Relative error against an identically-zero reference is undefined."""


# --- experiment configuration --------------------------------------------


class ConfigError(FracpinnError, ValueError):
    """Invalid experiment configuration; names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config error in '{field}': {message}")
        self.field = field
