"""Exception hierarchy. Everything raised deliberately derives from MaarError."""


class MaarError(Exception):
    pass


class ShapeError(MaarError, ValueError):
    pass


class DomainError(MaarError, ValueError):
    pass


class UnsupportedOpError(MaarError, TypeError):
    pass


class ConfigError(MaarError, ValueError):
    pass


class FormatError(MaarError, ValueError):
    pass


class MetricError(MaarError, ValueError):
    pass


class CheckpointError(MaarError, FileNotFoundError):
    pass
