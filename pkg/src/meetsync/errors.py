"""Exception hierarchy shared by all meetsync modules."""


class MeetsyncError(Exception):
    """Base class for every error raised by meetsync."""


class InvalidTimeError(MeetsyncError, ValueError):
    """A timestamp was NaN or infinite."""


class DegenerateModelError(MeetsyncError, ValueError):
    """A clock model has a non-positive slope and cannot be inverted."""


class DegenerateGeometryError(MeetsyncError, ValueError):
    """Anchors do not span distinct device times, so no slope can be estimated."""


class ConfigurationError(MeetsyncError, ValueError):
    """Invalid scenario, fault or pipeline configuration."""


class UnalignedStreamError(MeetsyncError):
    """A stream was asked to be aligned with an unaligned clock model."""

    def __init__(self, stream_id, device_id=None):
        self.stream_id = stream_id
        self.device_id = device_id
        msg = f"stream {stream_id!r} has no clock model"
        if device_id is not None:
            msg += f" (device {device_id!r} is unaligned)"
        super().__init__(msg)


class StructuralError(MeetsyncError, ValueError):
    """Session contents violate a structural requirement."""


class NotASessionError(MeetsyncError):
    """A directory does not contain a packaged session."""


class SessionExistsError(MeetsyncError):
    """Refusing to write over an existing session tree."""


class TSVParseError(MeetsyncError, ValueError):
    """Malformed row in a TSV file."""

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")
