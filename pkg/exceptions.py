"""
Custom exception classes for the crowd-adapt toolkit.
"""
from typing import Any, Dict, Optional


class CrowdAdaptError(Exception):
    """Base exception for crowd counting domain-adaptation errors."""

    def __init__(self, message: str, error_code: str = None, details: dict = None):
        self.message = message
        self.error_code = error_code or "GENERAL_ERROR"
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(CrowdAdaptError):
    """Raised when a configuration value or combination of values is invalid."""

    def __init__(self, message: str, config_key: str = None, value: Any = None):
        self.config_key = config_key
        self.value = value
        super().__init__(
            message,
            error_code="CONFIG_ERROR",
            details={"config_key": config_key, "value": value}
        )


class DataValidationError(CrowdAdaptError):
    """Raised when a sample, annotation or array violates its type invariants."""

    def __init__(self, message: str, field: str = None, value: Any = None):
        self.field = field
        self.value = value
        super().__init__(
            message,
            error_code="VALIDATION_ERROR",
            details={"field": field, "value": value}
        )


class FileProcessingError(CrowdAdaptError):
    """Raised when a file cannot be read, parsed or written."""

    def __init__(self, message: str, filename: str = None, error_code: str = "FILE_ERROR"):
        self.filename = filename
        super().__init__(
            message,
            error_code=error_code,
            details={"filename": str(filename) if filename is not None else None}
        )


class CheckpointError(FileProcessingError):
    """Raised when a checkpoint or weight container is corrupt or incompatible."""

    def __init__(self, message: str, filename: str = None, key: str = None):
        self.key = key
        super().__init__(message, filename=filename, error_code="CHECKPOINT_ERROR")
        self.details["key"] = key


class ShapeError(CrowdAdaptError):
    """Raised when tensor or map shapes break a network or loss contract."""

    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        self.expected = expected
        self.actual = actual
        super().__init__(
            message,
            error_code="SHAPE_ERROR",
            details={"expected": str(expected), "actual": str(actual)}
        )


class NumericalError(CrowdAdaptError):
    """Raised on non-finite losses or failed gradient checks."""

    def __init__(self, message: str, component: str = None, record: Optional[Dict[str, Any]] = None,
                 max_error: float = None):
        self.component = component
        self.record = record
        self.max_error = max_error
        super().__init__(
            message,
            error_code="NUMERIC_ERROR",
            details={"component": component, "record": record, "max_error": max_error}
        )


# Process exit codes per error code
EXIT_CODES = {
    "CONFIG_ERROR": 2,
    "VALIDATION_ERROR": 2,
    "FILE_ERROR": 2,
    "SHAPE_ERROR": 2,
    "NUMERIC_ERROR": 3,
    "CHECKPOINT_ERROR": 4,
    "GENERAL_ERROR": 1,
}

# User-friendly error messages
USER_ERROR_MESSAGES = {
    "CONFIG_ERROR": "The configuration is invalid. Check the named key and try again.",
    "VALIDATION_ERROR": "Input data failed validation. Check annotations and masks.",
    "FILE_ERROR": "A file could not be read or written. Check the path and permissions.",
    "SHAPE_ERROR": "Input dimensions do not match the network contract (multiples of 8).",
    "NUMERIC_ERROR": "A numerical failure occurred (non-finite loss or gradient mismatch).",
    "CHECKPOINT_ERROR": "The checkpoint is corrupt or does not match the configuration.",
    "GENERAL_ERROR": "An unexpected error occurred.",
}


def get_exit_code(error_code: str) -> int:
    """
    Map an error code to the process exit code.

    Args:
        error_code: Error code from exception

    Returns:
        Integer exit code (1 for unknown codes)
    """
    return EXIT_CODES.get(error_code, EXIT_CODES["GENERAL_ERROR"])


def get_user_friendly_message(error_code: str) -> str:
    """
    Get user-friendly error message for an error code.

    Args:
        error_code: Error code from exception

    Returns:
        User-friendly error message
    """
    return USER_ERROR_MESSAGES.get(error_code, USER_ERROR_MESSAGES["GENERAL_ERROR"])


def format_error_response(exception: CrowdAdaptError, include_details: bool = False) -> dict:
    """
    Format exception for CLI or JSON output.

    Args:
        exception: CrowdAdaptError instance
        include_details: Whether to include technical details

    Returns:
        Dictionary with error code, exit code and messages
    """
    response = {
        "error": True,
        "error_code": exception.error_code,
        "exit_code": get_exit_code(exception.error_code),
        "message": get_user_friendly_message(exception.error_code),
        "technical_message": str(exception)
    }

    if include_details and exception.details:
        response["details"] = exception.details

    return response
