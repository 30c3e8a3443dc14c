import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def env_log_level(default: str = "INFO") -> str:
    return os.getenv("OCPEC_LOG_LEVEL", default).upper()


def env_output_dir(default: str = "results") -> str:
    return os.getenv("OCPEC_OUTPUT_DIR", default)


def env_workers(default: int = 1) -> int:
    raw = os.getenv("OCPEC_WORKERS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logger.error(f"OCPEC_WORKERS={raw!r} is not an integer, using {default}")
        return default


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or env_log_level()).upper(), format=LOG_FORMAT)


def load_config_tree(path: Optional[str]) -> Dict[str, Any]:
    """Read a YAML or JSON config tree; a missing path yields an empty tree."""
    if not path:
        return {}
    source = Path(path)
    text = source.read_text(encoding="utf-8")
    if source.suffix.lower() == ".json":
        tree = json.loads(text)
    else:
        tree = yaml.safe_load(text)
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ValueError(f"Config file {path} must hold a mapping at the top level")
    logger.info(f"Loaded config tree from {path} with sections {sorted(tree)}")
    return tree


def merge_trees(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_trees(merged[key], value)
        else:
            merged[key] = value
    return merged
