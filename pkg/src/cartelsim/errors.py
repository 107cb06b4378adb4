"""Exception types shared across the package."""


class CartelsimError(Exception):
    """Base class for all package errors."""


class DomainError(CartelsimError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class SolverError(CartelsimError, RuntimeError):
    """A numerical solver failed to converge or to bracket a root."""


class ConsistencyError(CartelsimError, ValueError):
    """Inputs that must agree with each other do not."""


class ConfigError(CartelsimError, ValueError):
    """A configuration file or parameter set is invalid or incomplete."""


class LoadError(CartelsimError, ValueError):
    """An input file could not be parsed; message carries the row number."""


class EstimationError(CartelsimError, RuntimeError):
    """An estimator could not produce a valid result."""
