class DarkAdaptError(Exception):
    pass


class InvalidInputError(DarkAdaptError, ValueError):
    pass


class ShapeError(DarkAdaptError, ValueError):
    pass


class ConfigError(DarkAdaptError, ValueError):
    pass


class GenerationError(DarkAdaptError, ValueError):
    pass


class ConsistencyError(DarkAdaptError):
    pass


class CheckpointError(DarkAdaptError):
    """Checkpoint could not be loaded (missing, wrong version, fingerprint mismatch)."""


class PreconditionError(DarkAdaptError):
    pass
