import json
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

# Load environment variables (/etc/default/deepcsp and ./.env)
if os.path.exists("/etc/default/deepcsp"):
    load_dotenv("/etc/default/deepcsp")
load_dotenv()

_CONFIG_CACHE: Optional[Dict[str, Any]] = None
_CONFIG_PATH: Optional[str] = None


def get_config_path() -> str:
    return os.getenv("DEEPCSP_CONFIG_PATH", "deepcsp.json")


def _flatten(prefix: str, value: Any, out: Dict[str, Any]):
    if isinstance(value, dict):
        for key, inner in value.items():
            name = f"{prefix}.{key}" if prefix else str(key)
            _flatten(name, inner, out)
    else:
        out[prefix] = value


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Reads a JSON run config and flattens nested sections into dotted keys:
    {"train": {"lr_feature": 0.01}} -> {"train.lr_feature": 0.01}.
    Missing or unreadable files give an empty mapping.
    """
    if not path or not os.path.exists(path):
        return {}

    for encoding in ("utf-8", "utf-8-sig"):
        try:
            with open(path, "r", encoding=encoding) as handle:
                raw = json.load(handle)
        except (OSError, ValueError):
            continue
        if not isinstance(raw, dict):
            return {}
        parsed: Dict[str, Any] = {}
        _flatten("", raw, parsed)
        return parsed
    return {}


def _load_config() -> Dict[str, Any]:
    global _CONFIG_CACHE, _CONFIG_PATH

    path = get_config_path()
    if _CONFIG_CACHE is None or _CONFIG_PATH != path:
        _CONFIG_CACHE = read_config_file(path)
        _CONFIG_PATH = path
    return _CONFIG_CACHE


def get_config_value(key: str, default: Any = None) -> Any:
    config = _load_config()
    value = config.get(key)
    if value is None or value == "":
        return default
    return value


def env_float(name: str, default: float) -> float:
    return float(os.getenv(name, str(default)))


def env_int(name: str, default: int) -> int:
    return int(os.getenv(name, str(default)))
