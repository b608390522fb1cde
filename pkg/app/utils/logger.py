import functools
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional

ROOT_LOGGER = "domain_adapt"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logger(
    name: str = ROOT_LOGGER,
    level: int = logging.INFO,
    log_file: Optional[str] = None,
    log_format: str = LOG_FORMAT,
) -> logging.Logger:
    """
    Configure the package logger with a stdout handler and an optional file handler

    Calling it again (for example inside a grid worker process) only updates the level.

    Args:
        name: Logger name
        level: Logging level
        log_file: Optional file path for logging
        log_format: Log message format

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(log_format)
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


def get_logger(name: str = None) -> logging.Logger:
    """Child logger under the package logger, e.g. get_logger("training") -> "domain_adapt.training" """
    return logging.getLogger(f"{ROOT_LOGGER}.{name}" if name else ROOT_LOGGER)


def _describe_target(args, kwargs) -> str:
    """The file an IO call works on, if one was passed"""
    for value in list(kwargs.values()) + list(args):
        if isinstance(value, (str, Path)):
            return f" [{value}]"
    return ""


def _timed(log_name: str, operation: str, level: int, with_target: bool = False) -> Callable:
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            log = get_logger(log_name)
            label = operation + (_describe_target(args, kwargs) if with_target else "")
            log.log(level, f"{label}: started")
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                log.error(f"{label}: failed after {time.perf_counter() - start:.2f}s: {str(e)}")
                raise
            log.log(level, f"{label}: finished in {time.perf_counter() - start:.2f}s")
            return result
        return wrapper
    return decorator


def log_function_call(logger: logging.Logger = None):
    """
    Log entry and exit of a function at DEBUG level

    Only keyword arguments are logged; positional ones are usually arrays.
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            log = logger or get_logger()
            log.debug(f"Calling {func.__name__} with kwargs={kwargs}")
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                log.error(f"{func.__name__} failed: {str(e)}", exc_info=True)
                raise
            log.debug(f"{func.__name__} completed")
            return result
        return wrapper
    return decorator


def log_training_operation(operation: str):
    """Log start, duration and failure of a training run at INFO level"""
    return _timed("training", operation, logging.INFO)


def log_io_operation(operation: str):
    """Log a file read or write with its path at DEBUG level"""
    return _timed("io", operation, logging.DEBUG, with_target=True)
