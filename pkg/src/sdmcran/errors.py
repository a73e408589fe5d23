"""Exception types shared across the package."""


class SdmError(Exception):
    """Base class for all package errors."""


class SizeError(SdmError, ValueError):
    pass


class DomainError(SdmError, ValueError):
    pass


class AliasingError(SdmError, ValueError):
    pass


class NumericError(SdmError, ArithmeticError):
    pass


class AccuracyError(SdmError, ArithmeticError):
    """Quadrature refinement did not converge to the requested tolerance."""


class ModelError(SdmError, ValueError):
    pass


class EstimationError(SdmError, RuntimeError):
    pass


class FilterError(SdmError, ArithmeticError):
    """Particle filter failure; carries the offending symbol index."""

    def __init__(self, message, symbol_index=None):
        super().__init__(message)
        self.symbol_index = symbol_index


class ConfigError(SdmError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class SeriesError(SdmError, KeyError):
    def __init__(self, missing):
        super().__init__(f"missing series: {', '.join(missing)}")
        self.missing = list(missing)


class EstimationWarning(UserWarning):
    pass


class RateWarning(UserWarning):
    pass
