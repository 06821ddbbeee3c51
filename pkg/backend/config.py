import hashlib
import json
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from errors import ValidationError

# Load environment variables from .env file
load_dotenv()


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class Config:
    """Configuration settings for the segmentation harness"""

    # Reproducibility
    HARNESS_SEED: int = int(os.getenv("HARNESS_SEED", "0"))

    # Intensity harmonization
    TEMPLATE_RESOLUTION: int = int(os.getenv("TEMPLATE_RESOLUTION", "1024"))
    TEMPLATE_UNIT_RANGE: bool = _env_bool("TEMPLATE_UNIT_RANGE", True)

    # Slicing
    MIN_BRAIN_VOXELS: int = int(os.getenv("MIN_BRAIN_VOXELS", "1"))
    SLICE_SIZE: int = 224  # Fixed network input side

    # Storage locations
    RESULTS_DIR: str = os.getenv("RESULTS_DIR", "./results")
    DATA_DIR: str = os.getenv("DATA_DIR", "./data")

    # Execution
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    TORCH_THREADS: int = int(os.getenv("TORCH_THREADS", "1"))
    JOBS: int = int(os.getenv("JOBS", "1"))

    @classmethod
    def from_json(cls, path: str, base: Optional["Config"] = None) -> "Config":
        """Overlay settings from a JSON file onto ``base`` (or the defaults)"""
        with open(path, "r", encoding="utf-8") as handle:
            overrides: Dict[str, Any] = json.load(handle)
        return (base or cls()).updated(**overrides)

    def updated(self, **overrides: Any) -> "Config":
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValidationError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(self, **overrides)

    @property
    def results_path(self) -> Path:
        return Path(self.RESULTS_DIR)


def derive_seed(base: int, *labels: object) -> int:
    """Derive a child seed from ``base`` and a chain of labels.

    Each stochastic step (phantom structure, noise, split, init, shuffle) gets
    its own seed as sha256("base|label1|label2...") truncated to 31 bits, so
    any single step can be reproduced without replaying the others.
    """
    key = "|".join([str(base), *[str(label) for label in labels]])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging once for CLI and server entry points"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


config = Config()
