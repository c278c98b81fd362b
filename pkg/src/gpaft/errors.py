"""Exception hierarchy shared across the package."""


class GpaftError(Exception):
    """Base class for all package errors."""


class SchemaError(GpaftError):
    """An input file is missing a required column or is malformed."""


class DataValidationError(GpaftError):
    """Input values violate a precondition (e.g. nonpositive times)."""


class DegenerateKernelError(GpaftError):
    """A kernel cannot be normalized (all rows identical)."""


class NumericalError(GpaftError):
    """A factorization or solve failed even after regularization."""


class CannotFitError(GpaftError):
    """The data do not identify the model (e.g. no events)."""
