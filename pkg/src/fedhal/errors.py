"""Exception hierarchy shared by all fedhal modules."""


class FedHalError(Exception):
    """Base class for every error raised by fedhal."""


class DimensionError(FedHalError, ValueError):
    pass


class DomainError(FedHalError, ValueError):
    """A numeric argument lies outside its mathematical domain."""


class BatchCompositionError(FedHalError, ValueError):
    """A batch cannot supply positives and negatives for every anchor."""


class UsageError(FedHalError, RuntimeError):
    pass


class TrainingDivergenceError(FedHalError, FloatingPointError):
    pass


class DataError(FedHalError, ValueError):
    pass


class ParseError(FedHalError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ParseError):
    pass


class ProtocolError(FedHalError, RuntimeError):
    pass


class StaleUploadError(ProtocolError):
    pass


class EvaluationError(FedHalError, ValueError):
    pass


class ConfigError(FedHalError, ValueError):
    pass


class LabelError(FedHalError, ValueError):
    pass
