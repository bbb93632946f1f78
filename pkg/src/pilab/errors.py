"""Exception hierarchy shared by all pilab modules."""


class PilabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PilabError, ValueError):
    """Invalid configuration values or inconsistent settings."""


class ValidationError(PilabError, ValueError):
    """An input object violates its invariants (e.g. a degenerate box)."""


class ResolutionError(ValidationError):
    """A bounding box covers no pixel at the map resolution."""

    def __init__(self, message, object_index=None):
        super().__init__(message)
        self.object_index = object_index


class ShapeError(PilabError, ValueError):
    """Array shapes do not match what a layer or config expects."""


class StateError(PilabError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class FormatError(PilabError, ValueError):
    """A serialized file is corrupt, truncated or incompatible."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PilabError, ValueError):
    """A corpus or split is empty or otherwise unusable."""


class ProtocolError(PilabError, ValueError):
    """An evaluation protocol was violated (e.g. overlapping splits)."""


class SamplingError(PilabError, ValueError):
    """A sampler cannot draw what was requested from the given corpus."""


class DivergenceError(PilabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class GenerationSkipped(PilabError):
    """Raised when a generator cannot produce the requested item for a scene."""
