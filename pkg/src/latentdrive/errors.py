"""Exception types shared across the toolkit."""


class LatentDriveError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(LatentDriveError, ValueError):
    """Invalid configuration value, key, or file.

    ``line`` and ``key`` point at the offending entry when known.
    """

    def __init__(self, message, key=None, line=None, path=None):
        self.key = key
        self.line = line
        self.path = path
        where = ""
        if path is not None and line is not None:
            where = f"{path}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class PlacementError(LatentDriveError, RuntimeError):
    """Vehicles could not be placed without overlap."""


class UsageError(LatentDriveError, RuntimeError):
    """An API was called in the wrong state (e.g. stepping a finished episode)."""


class ContractError(LatentDriveError, ValueError):
    """Inputs violate a shape or value contract."""


class NotReadyError(LatentDriveError, RuntimeError):
    """The replay buffer holds no complete sampling window yet."""


class TrainingFault(LatentDriveError, FloatingPointError):
    """A loss term became non-finite; ``term`` names it."""

    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value in loss term {term!r}: {value}")


class CheckpointError(LatentDriveError, OSError):
    """A checkpoint archive is missing, corrupt, or of an unknown version."""
