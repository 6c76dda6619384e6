"""Exception types raised across the package."""


class OOCError(Exception):
    """Base class for all package errors."""


class ShapeError(OOCError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(OOCError, ValueError):
    """A vector is too close to zero to be normalized."""


class BatchTooSmallError(OOCError, ValueError):
    """A contrastive batch has no negatives to contrast against."""


class GenerationError(OOCError, RuntimeError):
    """A synthetic scene could not be generated from its parameters."""


class SchemaError(OOCError, ValueError):
    """A dataset record is malformed or violates the record schema.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DegenerateTestError(OOCError, ValueError):
    """A statistical test is undefined for the given input."""
