"""Exception taxonomy shared across the package."""


class CTKDError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CTKDError, ValueError):
    pass


class ConfigError(CTKDError, ValueError):
    pass


class ParameterError(CTKDError, ValueError):
    pass


class StateError(CTKDError, RuntimeError):
    pass


class ContractError(CTKDError, ValueError):
    pass


class DataError(CTKDError, ValueError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class IncompatibilityError(CTKDError, ValueError):
    pass
