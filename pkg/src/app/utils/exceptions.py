from typing import Any, Dict, Optional, Tuple

from pydantic import ValidationError


class ValidationException(Exception):
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ResourceNotFoundException(Exception):
    def __init__(self, message: str = "Resource not found."):
        super().__init__(message)
        self.message = message


class UnsupportedFormatException(Exception):
    def __init__(self, message: str = "Unsupported audio format."):
        super().__init__(message)
        self.message = message


class NonFiniteException(Exception):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.diagnostics = diagnostics or {}


# Exit codes used by the command-line surface
EXIT_VALIDATION = 2
EXIT_NOT_FOUND = 3
EXIT_FORMAT = 4
EXIT_DIVERGENCE = 5
EXIT_UNEXPECTED = 1

ErrorResponse = Tuple[int, Dict[str, Any]]


def validation_exception_handler(exc: ValidationException) -> ErrorResponse:
    return EXIT_VALIDATION, {"success": False, "message": "Invalid input.", "details": exc.message}


def resource_not_found_exception_handler(exc: ResourceNotFoundException) -> ErrorResponse:
    return EXIT_NOT_FOUND, {"success": False, "message": "Resource not found.", "details": exc.message}


def unsupported_format_exception_handler(exc: UnsupportedFormatException) -> ErrorResponse:
    return EXIT_FORMAT, {"success": False, "message": "Unsupported format.", "details": exc.message}


def non_finite_exception_handler(exc: NonFiniteException) -> ErrorResponse:
    return EXIT_DIVERGENCE, {
        "success": False,
        "message": exc.message,
        "details": exc.diagnostics,
    }


def schema_validation_error_handler(exc: ValidationError) -> ErrorResponse:
    errors = {}
    for err in exc.errors():
        field = ".".join(str(loc) for loc in err["loc"]) or "__root__"
        message = err["msg"]

        # pydantic prefixes custom messages with "Value error, "
        if message.startswith("Value error,"):
            message = message.split(",", 1)[1].strip()

        errors[field] = message

    return EXIT_VALIDATION, {"errors": errors}


def generic_exception_handler(exc: Exception) -> ErrorResponse:
    return EXIT_UNEXPECTED, {
        "success": False,
        "message": "An unexpected error occurred.",
        "details": str(exc),
    }
