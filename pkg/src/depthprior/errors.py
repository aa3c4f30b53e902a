"""Exception types shared across the package."""


class DepthPriorError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DepthPriorError):
    """An image, patch or operator has incompatible dimensions."""


class UncoveredPixelError(DepthPriorError):
    """Reassembly was asked to produce pixels no patch covers."""

    def __init__(self, coordinates):
        self.coordinates = list(coordinates)
        shown = ", ".join(str(c) for c in self.coordinates[:8])
        more = "" if len(self.coordinates) <= 8 else f" (+{len(self.coordinates) - 8} more)"
        super().__init__(f"pixels not covered by any patch: {shown}{more}")


class ModelFormatError(DepthPriorError):
    """A model container file is malformed, truncated or corrupt."""


class DegenerateComponentError(DepthPriorError):
    """A mixture component collapsed during training and could not be repaired."""


class ConfigError(DepthPriorError):
    """A configuration file contains an invalid or unknown entry."""


class DataError(DepthPriorError):
    """A dataset directory or image file could not be ingested."""
