"""Exception types shared across the package."""


class DomainError(ValueError):
    """A parameter or argument lies outside its admissible domain."""


class DataError(ValueError):
    """Input data is unusable (too few observations, constant columns, ...)."""


class FitError(RuntimeError):
    """Estimation or model selection failed."""


class NumericError(RuntimeError):
    """A numeric routine failed (root finding, PSD completion, underflow)."""
