"""Exception types raised across the package.

Everything that signals bad input derives from :class:`ValidationError` so the
command line can map it to exit status 1; filesystem problems surface as the
builtin :class:`OSError` and map to exit status 2.
"""


class PseudoLabelError(Exception):
    """Base class for all package errors."""


class ValidationError(PseudoLabelError, ValueError):
    """Input violates a documented precondition."""


class InvalidBox(ValidationError):
    pass


class ZeroSizeAnchor(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class IntegrityError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DuplicateKeyError(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class InsufficientShots(ValidationError):
    pass


class MissingEmbedding(ValidationError):
    pass


class BadK(ValidationError):
    pass


class NormalizationError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class EmptyStage(ValidationError):
    pass


class DivergedLoss(PseudoLabelError, ArithmeticError):
    pass


class MissingFeature(ValidationError):
    pass


class NoGroundTruth(ValidationError):
    pass


class CenterPlacementFailure(PseudoLabelError, RuntimeError):
    pass


class CollapsedBoxWarning(UserWarning):
    """A cascade stage produced a zero-size box; the last valid box was kept."""
