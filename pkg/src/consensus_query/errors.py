"""Exception types raised across the package."""


class ConsensusQueryError(Exception):
    """Base class for all package errors."""


class DomainError(ConsensusQueryError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(ConsensusQueryError, ArithmeticError):
    """A matrix factorization or solve failed.

    ``pivot`` is the 0-based index of the failing Cholesky pivot when known.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SamplerError(ConsensusQueryError, RuntimeError):
    """The MCMC sampler hit a non-finite density; ``state`` holds the offending point."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class InferenceError(ConsensusQueryError, RuntimeError):
    """Importance weights collapsed while estimating a vote or consensus posterior."""


class ParseError(ConsensusQueryError, ValueError):
    """A dataset line could not be parsed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(ConsensusQueryError, ValueError):
    """Records violate the dataset schema (shape or value bounds)."""
