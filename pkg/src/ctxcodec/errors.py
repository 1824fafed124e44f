"""Exception types shared across the codec.

The CLI maps these onto exit codes: FormatError (and subclasses) exit 2,
ContractError / DimensionError exit 3.
"""


class CodecError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(CodecError):
    """Operand shapes or extents violate an operation's contract."""


class ContractError(CodecError):
    """A precondition on values or call order was violated."""


class FormatError(CodecError):
    """A byte stream or file does not match its declared format."""


class SymbolRangeError(ContractError):
    """A symbol handed to the range coder lies outside its alphabet."""
