import logging
import traceback
from typing import Any, Dict, List

from fastapi import FastAPI, Request, status
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from app.exceptions import BaseCustomException, NumericError, convert_to_http_exception
from app.utils.logger import get_logger

logger = get_logger("error_handler")


def _error_body(message: str, error_type: str, details: Dict[str, Any]) -> Dict[str, Any]:
    return {"message": message, "error_type": error_type, "details": details}


def _field_errors(exc: RequestValidationError) -> List[str]:
    """Flatten pydantic error locations into "query.threshold: <msg>" strings"""
    return [".".join(str(part) for part in err["loc"]) + f": {err['msg']}" for err in exc.errors()]


def setup_error_handlers(app: FastAPI):
    """
    Register the JSON error handlers used by the segmentation API

    Every error body has the shape {"message", "error_type", "details"}.
    """

    @app.exception_handler(BaseCustomException)
    async def custom_exception_handler(request: Request, exc: BaseCustomException):
        # Client mistakes (bad uploads, thresholds) are warnings; server-side failures are errors
        level = logging.ERROR if exc.status_code >= 500 else logging.WARNING
        logger.log(level, f"{exc.__class__.__name__} on {request.url.path}: {exc.message}",
                   extra={"details": exc.details})
        http_exception = convert_to_http_exception(exc)
        return JSONResponse(status_code=http_exception.status_code, content=http_exception.detail)

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError):
        fields = _field_errors(exc)
        logger.warning(f"Rejected request to {request.url.path}: {'; '.join(fields)}")
        return JSONResponse(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            content=_error_body("Validation error", "ValidationError", {"fields": fields, "errors": exc.errors()}),
        )

    @app.exception_handler(FloatingPointError)
    async def floating_point_handler(request: Request, exc: FloatingPointError):
        numeric = NumericError("Non-finite value during segmentation", details={"original_error": str(exc)})
        return await custom_exception_handler(request, numeric)

    @app.exception_handler(Exception)
    async def general_exception_handler(request: Request, exc: Exception):
        logger.error(f"Unexpected error on {request.url.path}: {str(exc)}", exc_info=True)
        details = {"original_error": str(exc)}
        if logger.isEnabledFor(logging.DEBUG):
            details["traceback"] = traceback.format_exc()
        return JSONResponse(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            content=_error_body("Internal server error", "InternalServerError", details),
        )
