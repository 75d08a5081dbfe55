"""
Run configuration: environment defaults, key=value config files and manifests.

Resolution order is command-line flags > config file > PSNET_* environment
variables > built-in defaults.
"""
import logging
import os
from pathlib import Path
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from modules.errors import InputValidationError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "PSNET_"


def get_default_threads() -> Optional[int]:
    """Thread cap from PSNET_THREADS, or None for library defaults."""
    value = os.getenv(f"{ENV_PREFIX}THREADS")
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        raise InputValidationError("PSNET_THREADS must be an integer", value=value) from None
    if threads < 1:
        raise InputValidationError("PSNET_THREADS must be positive", value=value)
    return threads


def get_log_level() -> str:
    return os.getenv(f"{ENV_PREFIX}LOG_LEVEL", "INFO").upper()


def get_output_dir() -> Path:
    return Path(os.getenv(f"{ENV_PREFIX}OUTPUT_DIR", "."))


def environment_settings() -> Dict[str, str]:
    """Every PSNET_* variable as a lower-case key without the prefix."""
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in os.environ.items()
        if key.startswith(ENV_PREFIX)
    }


def load_config_file(path) -> Dict[str, str]:
    """Parse a plain key=value file (a previous manifest works too)."""
    path = Path(path)
    if not path.is_file():
        raise InputValidationError("config file not found", path=str(path))
    values = dotenv_values(path)
    return {key.strip().lower().replace("-", "_"): value for key, value in values.items() if value is not None}


def resolve(flags: Mapping[str, object], defaults: Mapping[str, object],
            config_path=None, types: Optional[Mapping[str, type]] = None) -> Dict[str, object]:
    """Merge settings; flags left at None fall through to the next layer.

    Config-file and environment values arrive as strings and are converted to the
    type of the matching default, or to types[key] when the default is None.
    """
    types = types or {}
    file_values = load_config_file(config_path) if config_path else {}
    env_values = environment_settings()
    resolved: Dict[str, object] = {}
    for key, default in defaults.items():
        if flags.get(key) is not None:
            resolved[key] = flags[key]
        elif key in file_values:
            resolved[key] = _convert(key, file_values[key], default, types.get(key))
        elif key in env_values:
            resolved[key] = _convert(key, env_values[key], default, types.get(key))
        else:
            resolved[key] = default
    for key, value in flags.items():
        resolved.setdefault(key, value)
    return resolved


def _convert(key: str, text: str, default, target: Optional[type] = None):
    if default is None and target is not None:
        default = target(0)
    if default is None or isinstance(default, str):
        return text
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return type(default)(text)
    except ValueError:
        raise InputValidationError(f"cannot read setting {key!r}", value=text) from None


def write_manifest(path, values: Mapping[str, object]) -> Path:
    """Write resolved settings as sorted key=value lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_format(value)}" for key, value in sorted(values.items()) if value is not None]
    path.write_text("\n".join(lines) + "\n")
    logger.debug(f"manifest written to {path}")
    return path


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
