"""Exception types raised across the package."""


class HidraError(Exception):
    """Base class for all package errors."""


class DimensionError(HidraError, ValueError):
    pass


class ValidationError(HidraError, ValueError):
    pass


class ContractError(HidraError, ValueError):
    pass


class LineageError(HidraError, ValueError):
    """A tensor does not belong to the tape being differentiated (or was truncated away)."""


class NonFiniteError(HidraError, FloatingPointError):
    pass


class FormatError(HidraError, ValueError):
    """Malformed parameter or dataset file."""


class CapacityError(HidraError, ValueError):
    """Not enough classes or instances to build the requested episode."""


class CapabilityError(HidraError, ValueError):
    """A static-head model was asked to handle a class count it does not have."""
