"""Exception hierarchy shared across the pipeline."""


class TeleimmersionError(Exception):
    """Base class for every error raised by this package."""


class CoordinateError(TeleimmersionError, IndexError):
    pass


class BehindCameraError(TeleimmersionError, ValueError):
    pass


class ShapeError(TeleimmersionError, ValueError):
    pass


class InvalidPoseError(TeleimmersionError, ValueError):
    pass


class ModelError(TeleimmersionError, ValueError):
    pass


class OracleSizeError(TeleimmersionError, ValueError):
    pass


class StateError(TeleimmersionError, ValueError):
    pass


class EmptyGeometryError(TeleimmersionError, ValueError):
    pass


class IdentifierError(TeleimmersionError, ValueError):
    pass


class FormatError(TeleimmersionError, ValueError):
    """Malformed file on disk (.rgbd, .pgm, config, scene)."""


class ConfigError(TeleimmersionError, ValueError):
    pass
