"""Shared exception types."""


class LatdynError(Exception):
    """Base class for all library errors."""


class ShapeError(LatdynError):
    """Tensor dimensions incompatible with the requested operation."""


class NumericError(LatdynError):
    """Non-finite values encountered where finite ones are required."""


class ContractError(LatdynError):
    """A documented precondition was violated."""


class DataError(LatdynError):
    """Malformed or invalid dataset content."""


class ArchiveError(LatdynError):
    """Corrupt or unreadable model archive."""
