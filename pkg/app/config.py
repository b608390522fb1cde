from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar, Union

from pydantic import BaseModel, BaseSettings, ValidationError, validator

from app.exceptions import ConfigError, handle_io_error


class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    # Grid runner
    DEFAULT_JOBS: int = 1

    # Segmentation service
    MODEL_CHECKPOINT: Optional[str] = None
    SEGMENT_THRESHOLD: float = 0.5

    @validator("LOG_LEVEL", pre=True, always=True)
    def normalize_log_level(cls, v):
        if v is None:
            return "INFO"
        # Remove comments and whitespace
        v = str(v).split("#")[0].strip().upper()
        if v not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level {v}")
        return v

    @validator("DEFAULT_JOBS")
    def validate_jobs(cls, v):
        if v < 1:
            raise ValueError("DEFAULT_JOBS must be at least 1")
        return v

    class Config:
        env_file = ".env"


settings = Settings()


ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]


def load_key_value_file(path: PathLike) -> Dict[str, str]:
    """
    Read a plain-text `key = value` file

    Blank lines and everything after `#` are ignored.

    Args:
        path: Config file path

    Returns:
        Raw string values keyed by (possibly dotted) key

    Raises:
        ConfigError: On malformed lines or repeated keys
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise handle_io_error(e, f"reading config {path}")

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("Config lines must have the form key = value",
                              details={"path": str(path), "line": lineno, "content": raw})
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("Empty config key", details={"path": str(path), "line": lineno})
        if key in values:
            raise ConfigError(f"Config key {key} is set twice", details={"path": str(path), "key": key, "line": lineno})
        values[key] = value
    return values


def _parse_value(value: str) -> Union[str, List[str]]:
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def nest_keys(flat: Dict[str, str]) -> Dict[str, Any]:
    """Turn dotted keys into nested sections: `source.blur_sigma` -> {"source": {"blur_sigma": ...}}."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key {key} conflicts with a plain value", details={"key": key})
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Config key {key} conflicts with a section", details={"key": key})
        node[parts[-1]] = _parse_value(value)
    return nested


def _config_error(error: ValidationError, path: Path) -> ConfigError:
    unknown, missing, invalid = [], [], {}
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"] if part != "__root__")
        if item["type"] == "value_error.extra":
            unknown.append(key)
        elif item["type"] == "value_error.missing":
            missing.append(key)
        else:
            invalid[key or "config"] = item["msg"]

    parts = []
    if unknown:
        parts.append(f"unknown keys: {', '.join(unknown)}")
    if missing:
        parts.append(f"missing keys: {', '.join(missing)}")
    if invalid:
        parts.append("invalid values: " + ", ".join(f"{k} ({m})" for k, m in invalid.items()))
    return ConfigError(
        f"Invalid config {path.name}: " + "; ".join(parts),
        details={"path": str(path), "unknown_keys": unknown, "missing_keys": missing, "invalid": invalid},
    )


def load_run_config(path: Optional[PathLike], model_cls: Type[ModelT],
                    overrides: Optional[Dict[str, Any]] = None) -> ModelT:
    """
    Load a key=value file into a pydantic model

    Args:
        path: Config file path
        model_cls: Schema to validate against (extra keys forbidden)
        overrides: Top-level values that replace the file's (None values are ignored)

    Returns:
        Validated model instance

    Raises:
        ConfigError: Naming unknown, missing or invalid keys
    """
    nested = nest_keys(load_key_value_file(path)) if path is not None else {}
    nested.update({k: v for k, v in (overrides or {}).items() if v is not None})
    path = Path(path) if path is not None else Path("<defaults>")
    try:
        return model_cls(**nested)
    except ValidationError as e:
        raise _config_error(e, path)
