"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class PreconditionError(ValueError):
    """A bound or estimate was requested outside its range of validity."""


class ConfigError(ValueError):
    """Invalid scenario or run configuration."""


class ResourceError(MemoryError):
    """Requested allocation exceeds the configured memory budget."""


class NonFiniteError(FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RegressionError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
