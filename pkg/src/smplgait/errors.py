"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class SmplGaitError(Exception):
    exit_code = 1


class ConfigError(SmplGaitError, ValueError):
    exit_code = 2


class DataError(SmplGaitError, ValueError):
    exit_code = 3


class ManifestError(DataError):
    pass


class SmplParseError(DataError):
    pass


class EmptySilhouetteError(DataError):
    def __init__(self, frame_index=None):
        self.frame_index = frame_index
        where = "" if frame_index is None else f" (frame {frame_index})"
        super().__init__(f"empty silhouette{where}")


class ShapeError(SmplGaitError, ValueError):
    exit_code = 2


class NumericError(SmplGaitError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])
