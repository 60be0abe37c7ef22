"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class FusionError(Exception):
    exit_code = 1
    stage = None

    def with_stage(self, stage):
        self.stage = stage
        return self

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ConfigError(FusionError):
    exit_code = 2


class WeightsError(FusionError):
    exit_code = 3


class MissingTensor(WeightsError):
    pass


class ShapeMismatch(WeightsError):
    pass


class DimensionError(FusionError):
    exit_code = 4


class BatchTooSmall(FusionError):
    exit_code = 4


class InvalidDistribution(FusionError):
    exit_code = 4


class DataError(FusionError):
    exit_code = 5


class DecodeError(DataError):
    pass


class EmptyImage(DataError):
    pass


class UnknownClassDirectory(DataError):
    pass


class EmptyClass(DataError):
    pass


class InsufficientImages(DataError):
    pass


class IOFailure(DataError):
    pass


class MetricsError(FusionError):
    exit_code = 6


class LengthMismatch(MetricsError):
    pass


class OutOfRangeLabel(MetricsError):
    pass
