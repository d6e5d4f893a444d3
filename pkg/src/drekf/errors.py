"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible shapes."""


class NumericInputError(ValueError):
    """Input contains NaN/Inf or violates a numeric precondition."""


class SingularMeasurementError(ValueError):
    """Measurement map evaluated inside its singular region."""


class ConfigError(ValueError):
    """Invalid scenario configuration. ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class SdpConvergenceError(RuntimeError):
    """Stage SDP failed to converge. Carries the best iterate found."""

    def __init__(self, message, best_solution=None, stage=None):
        self.best_solution = best_solution
        self.stage = stage
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
