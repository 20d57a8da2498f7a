"""Exception hierarchy shared by every module.

Callers that only care about "bad input" can catch :class:`MCEIUError`;
the CLI maps all of these to exit code 1.
"""


class MCEIUError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MCEIUError, ValueError):
    pass


class DomainError(MCEIUError, ValueError):
    pass


class ContractError(MCEIUError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericError(MCEIUError, ArithmeticError):
    pass


class DataError(MCEIUError, ValueError):
    """Input data (labels, files, records) is inconsistent or invalid."""


class FormatError(DataError):
    """A binary container has a bad header or payload."""


class ParseError(DataError):
    pass
