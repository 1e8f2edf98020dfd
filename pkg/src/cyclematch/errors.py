"""Exception types shared across the cyclematch package."""


class CycleMatchError(Exception):
    """Base class for all cyclematch errors."""


class FormatError(CycleMatchError):
    """A file does not conform to the CSTF-1 container format."""


class ArgumentError(CycleMatchError):
    """An argument violates an operation's preconditions."""


class EmptyForeground(CycleMatchError):
    """A class has no foreground cells in the reference mask."""


class DegenerateMask(CycleMatchError):
    """A binary mask is all-foreground or all-background where both are required."""


class NumericsError(CycleMatchError):
    """A numeric computation produced a non-finite or diverging value."""


class BridgeError(CycleMatchError):
    """The external mask-decoder worker misbehaved (timeout, bad response, crash)."""
