class BPPOException(Exception):
    """Base class for every exception raised by the lab."""
    exit_code = 1


class ConfigurationException(BPPOException):
    """Exception raised when a config is not valid."""
    exit_code = 3


class TaskException(BPPOException):
    """Exception raised when a task is not specified properly."""
    exit_code = 3


class CurationException(BPPOException):
    """Exception raised when prompt curation is not invoked properly."""
    exit_code = 3


class CheckpointException(BPPOException):
    """Exception raised when a checkpoint is missing or cannot be read."""
    exit_code = 4


class WarmupFailedException(BPPOException):
    """Exception raised when supervised warmup misses its accuracy target."""
    exit_code = 5

    def __init__(self, msg: str, best_accuracy: float = 0.0):
        super().__init__(msg)
        self.best_accuracy = best_accuracy


class GradientCheckException(BPPOException):
    """Exception raised when a finite-difference check exceeds its threshold."""
    exit_code = 6


class TrainingAbortedException(BPPOException):
    """Exception raised when training hits a non-finite loss."""
    exit_code = 7


class ReportSchemaException(BPPOException):
    """Exception raised when a metrics log does not match the expected schema."""
    exit_code = 8


class NumericsException(BPPOException):
    """Exception raised upon a shape mismatch or a non-finite value."""
    exit_code = 9


class TapeException(BPPOException):
    """Exception raised when a tape cannot be replayed."""
    exit_code = 9
