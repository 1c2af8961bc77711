"""Exception hierarchy. The CLI maps each family to an exit code."""


class LatentcastError(Exception):
    exit_code = 4


class ConfigError(LatentcastError, ValueError):
    exit_code = 2


class DataError(LatentcastError, ValueError):
    exit_code = 3


class InvalidGridError(DataError):
    pass


class DegenerateChannelError(DataError):
    pass


class IngestionError(DataError):
    pass


class CatalogError(DataError):
    pass


class ShapeError(LatentcastError, ValueError):
    exit_code = 4


class SamplingError(LatentcastError, ValueError):
    exit_code = 3


class CheckpointError(LatentcastError):
    exit_code = 4
