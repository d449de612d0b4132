class CpriCompressionError(Exception):
    ...


class ImproperlyConfigured(CpriCompressionError):
    """Options or frame fields that cannot describe a valid run"""


class InputShapeError(CpriCompressionError, ValueError):
    ...


class UndefinedMetricError(CpriCompressionError):  # noqa: N818
    ...


class StatisticsError(CpriCompressionError):
    ...


class NumericalFailure(CpriCompressionError):  # noqa: N818
    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step


class CorruptStreamError(CpriCompressionError):
    ...


class UntrainedLayerError(CpriCompressionError):
    ...


class BundleFormatError(CpriCompressionError):
    ...
