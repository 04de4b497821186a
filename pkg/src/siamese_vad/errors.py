"""Exception hierarchy. Each family maps onto one CLI exit code."""


class VadError(Exception):
    exit_code = 1


class ConfigurationError(VadError):
    """Bad config, broken artifact chain, or mismatched fingerprints."""

    exit_code = 2


class ModelMismatchError(ConfigurationError):
    pass


class MissingArtifactError(ConfigurationError):
    pass


class DataError(VadError):
    """Malformed input data or an impossible request on valid data."""

    exit_code = 3


class DataFormatError(DataError):
    pass


class InvalidInputError(DataError, ValueError):
    pass


class InvalidTransformError(InvalidInputError):
    pass


class InvalidSpecError(InvalidInputError):
    pass


class NotFoundError(DataError, FileNotFoundError):
    pass


class OutOfRangeError(DataError, IndexError):
    pass


class EmptyRegionError(DataError):
    pass


class CurationError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class UnusableModelError(DataError):
    pass


class NumericFailureError(VadError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer
