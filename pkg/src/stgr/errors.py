"""Exception hierarchy shared across the package."""


class STGRError(Exception):
    """Base class for all package errors."""


class ShapeError(STGRError, ValueError):
    """Operand shapes or grid dimensions do not line up."""


class ArgumentError(STGRError, ValueError):
    """An argument is structurally invalid (empty list, non-scalar loss, ...)."""


class DegenerateInputError(STGRError, ValueError):
    """The input is valid but has nothing to operate on (e.g. an empty mask)."""


class NumericDomainError(STGRError, ArithmeticError):
    """NaN/inf encountered or a function evaluated outside its domain."""


class ContractError(STGRError, RuntimeError):
    """A calling contract was violated (non-deterministic function, frozen grad)."""


class ConfigError(STGRError, ValueError):
    """Invalid configuration value or unknown key."""


class ParseError(STGRError, ValueError):
    """A file does not conform to its schema."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ValidationError(STGRError, ValueError):
    """A parsed object violates a domain invariant."""


class GenerationError(STGRError, RuntimeError):
    """Synthetic placement failed within the retry budget."""
