"""Partially observable Markov game interface shared by substrates and trainers.

An environment is described by a :class:`GameSpec` and exposes two calls:

* ``reset(seed) -> (state, observations)``
* ``step(state, joint_action) -> StepOutcome`` (advances ``state`` in place)

All stochasticity lives in the state's own random generator, so a trajectory
is a pure function of the reset seed and the action sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Generic, Sequence, TypeVar

import numpy as np

from .errors import ConfigError, InvalidAction

StateT = TypeVar("StateT")


@dataclass(frozen=True)
class GameSpec:
    n_agents: int
    action_count: int
    obs_dim: int
    episode_length: int
    discount: float = 0.99

    def __post_init__(self) -> None:
        if self.n_agents < 2:
            raise ConfigError(f"n_agents must be >= 2, got {self.n_agents}")
        if self.action_count < 1:
            raise ConfigError(f"action_count must be >= 1, got {self.action_count}")
        if self.obs_dim < 1:
            raise ConfigError(f"obs_dim must be >= 1, got {self.obs_dim}")
        if self.episode_length < 1:
            raise ConfigError(f"episode_length must be >= 1, got {self.episode_length}")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError(f"discount must lie in (0, 1], got {self.discount}")


def validate_joint(spec: GameSpec, actions: Sequence[int]) -> np.ndarray:
    """Return ``actions`` as an int array, raising InvalidAction on bad input."""
    arr = np.asarray(actions)
    if arr.shape != (spec.n_agents,):
        raise InvalidAction(f"expected {spec.n_agents} actions, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidAction(f"actions must be integers, got dtype {arr.dtype}")
    if np.any(arr < 0) or np.any(arr >= spec.action_count):
        raise InvalidAction(f"action out of range [0, {spec.action_count}): {arr.tolist()}")
    return arr.astype(np.int64)


@dataclass
class StepOutcome:
    observations: np.ndarray  # (N, obs_dim) float32
    rewards: np.ndarray  # (N,) float64
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class Environment(Generic[StateT]):
    """Base class for substrates. Subclasses fill in ``spec`` and the two calls."""

    spec: GameSpec
    name: str = "environment"

    def reset(self, seed: int) -> tuple[StateT, np.ndarray]:
        raise NotImplementedError

    def step(self, state: StateT, joint: Sequence[int]) -> StepOutcome:
        raise NotImplementedError
