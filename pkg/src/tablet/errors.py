"""Exception types raised across the package."""


class TabletError(Exception):
    pass


class ShapeError(TabletError, ValueError):
    pass


class DataError(TabletError, ValueError):
    pass


class ConfigError(TabletError, ValueError):
    pass


class NiftiError(TabletError, IOError):
    pass


class AdapterError(TabletError, RuntimeError):
    pass


class CacheError(TabletError, IOError):
    """Token cache missing, truncated, or failing its checksum."""


class NumericError(TabletError, FloatingPointError):
    pass


class LossError(TabletError, ValueError):
    pass


class TrainingDivergedError(TabletError, RuntimeError):
    pass


class UnsupportedBackendError(TabletError, TypeError):
    pass
