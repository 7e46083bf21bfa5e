"""Exception hierarchy shared across the package."""


class GliomaMILError(Exception):
    """Base class for all package errors."""


class DimensionError(GliomaMILError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(GliomaMILError, ValueError):
    """Input is mathematically degenerate for the requested op (e.g. zero norm)."""


class ContractError(GliomaMILError, RuntimeError):
    """A precondition of an operation was violated."""


class NumericalError(GliomaMILError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class ConfigError(GliomaMILError, ValueError):
    """Invalid or infeasible configuration."""


class EstimationError(GliomaMILError, ValueError):
    """Statistics could not be estimated from the given data."""


class IngestionError(GliomaMILError, ValueError):
    """A patch bag or its labels failed validation."""


class FormatError(GliomaMILError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(FormatError):
    """A record decoded cleanly but violates a semantic rule."""
