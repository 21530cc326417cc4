"""Exception types shared across the package."""


class EgoflowError(Exception):
    """Base class for all egoflow errors."""


class NonPositiveDepth(EgoflowError):
    pass


class GridTooLarge(EgoflowError):
    pass


class DimensionMismatch(EgoflowError):
    pass


class TooFewMeasurements(EgoflowError):
    pass


class DegenerateSystem(EgoflowError):
    pass


class PatchUnderdetermined(EgoflowError):
    pass


class EmptyField(EgoflowError):
    pass


class EmptyMask(EgoflowError):
    pass


class LengthMismatch(EgoflowError):
    pass


class DegenerateField(EgoflowError):
    pass


class InsufficientData(EgoflowError):
    pass


class UnsupportedFormat(EgoflowError):
    pass


class InconsistentDimensions(EgoflowError):
    pass


class BadMagic(EgoflowError):
    pass


class TruncatedFile(EgoflowError):
    pass


class ParseError(EgoflowError):
    pass


class UnknownConstraint(EgoflowError):
    pass


class NonOrthonormalRotation(UserWarning):
    """Warning emitted when a parsed rotation block is not orthonormal."""
