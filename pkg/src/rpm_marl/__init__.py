"""Ranked policy memory (RPM) for multi-agent PPO on gridworld social dilemmas."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .errors import RpmError

__version__ = "0.1.0"

EXAMPLE_CHECKPOINT = "stag_hunt_example.ckpt"


def example_checkpoint_path() -> Path:
    """Path of the small Stag Hunt checkpoint shipped with the package."""
    return Path(str(resources.files(__package__) / "data" / EXAMPLE_CHECKPOINT))


__all__ = ["RpmError", "example_checkpoint_path", "__version__"]
