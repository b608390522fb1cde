from fastapi import HTTPException, status
from typing import Any, Dict, Optional

from app.utils.logger import get_logger


class BaseCustomException(Exception):
    """Base custom exception class"""
    def __init__(self, message: str, status_code: int = 500, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.status_code = status_code
        self.details = details or {}
        super().__init__(self.message)


class DimensionError(BaseCustomException):
    """Raised when array shapes do not agree with an operation's contract"""
    def __init__(self, message: str = "Dimension mismatch", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_422_UNPROCESSABLE_ENTITY, details)


class ParameterError(BaseCustomException):
    """Raised when a scalar argument is outside its valid range"""
    def __init__(self, message: str = "Invalid parameter", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class StateError(BaseCustomException):
    """Raised when an object is used in a state that does not support the call"""
    def __init__(self, message: str = "Invalid state", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_409_CONFLICT, details)


class DataError(BaseCustomException):
    """Raised when a dataset or label array is empty or malformed"""
    def __init__(self, message: str = "Invalid data", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class NumericError(BaseCustomException):
    """Raised when training produces a non-finite value"""
    def __init__(self, message: str = "Numeric failure", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_500_INTERNAL_SERVER_ERROR, details)


class GenerationError(BaseCustomException):
    """Raised when the synthetic generator cannot satisfy its configuration"""
    def __init__(self, message: str = "Generation failed", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_500_INTERNAL_SERVER_ERROR, details)


class NormalizationError(BaseCustomException):
    """Raised when a channel cannot be min-max normalized"""
    def __init__(self, message: str = "Normalization failed", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class SamplingError(BaseCustomException):
    """Raised when a volume has too few valid patch centers"""
    def __init__(self, message: str = "Sampling failed", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class FormatError(BaseCustomException):
    """Raised when a volume or checkpoint file is malformed"""
    def __init__(self, message: str = "Malformed file", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class UnsupportedVersionError(FormatError):
    """Raised when a file declares a format version this build cannot read"""
    def __init__(self, message: str = "Unsupported format version", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)


class CompatibilityError(BaseCustomException):
    """Raised when two parameter sets do not share a network description"""
    def __init__(self, message: str = "Incompatible network", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_409_CONFLICT, details)


class ConversionError(BaseCustomException):
    """Raised when a patch network cannot be converted to its convolutional form"""
    def __init__(self, message: str = "Conversion failed", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_422_UNPROCESSABLE_ENTITY, details)


class MetricError(BaseCustomException):
    """Raised when a metric is undefined for its inputs"""
    def __init__(self, message: str = "Metric undefined", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_422_UNPROCESSABLE_ENTITY, details)


class ConfigError(BaseCustomException):
    """Raised when a configuration file is missing keys or contains unknown ones"""
    def __init__(self, message: str = "Configuration error", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_400_BAD_REQUEST, details)


class StorageError(BaseCustomException):
    """Raised when reading or writing a file fails at the OS level"""
    def __init__(self, message: str = "Storage error", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, status.HTTP_500_INTERNAL_SERVER_ERROR, details)


def convert_to_http_exception(exc: BaseCustomException) -> HTTPException:
    """Convert custom exception to HTTPException"""
    return HTTPException(
        status_code=exc.status_code,
        detail={
            "message": exc.message,
            "error_type": exc.__class__.__name__,
            "details": exc.details
        }
    )


def handle_io_error(error: OSError, operation: str = "file operation") -> StorageError:
    """Wrap an OSError from a volume, checkpoint or CSV access in a StorageError"""
    get_logger("io").error(f"IO error during {operation}: {str(error)}")
    return StorageError(
        message=f"IO error during {operation}",
        details={
            "operation": operation,
            "path": str(error.filename) if getattr(error, "filename", None) else None,
            "original_error": str(error),
        },
    )
