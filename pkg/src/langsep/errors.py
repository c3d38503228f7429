"""Exception types shared across the package.

ContractError covers violated preconditions (and maps to CLI exit code 1),
ParseError covers malformed files and flags (CLI exit code 2).
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated."""


class ShapeError(ContractError):
    """Operands have incompatible dimensions."""


class NumericError(ContractError):
    """A computation produced or received a non-finite value."""


class ParseError(ValueError):
    """A file or argument could not be parsed."""


class ProtocolEmptyError(ContractError):
    """No valid trial can be built from the given metadata."""
