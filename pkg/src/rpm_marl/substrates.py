"""Desk-scale grid substrates: five matrix-game gathering worlds and Clean Up.

Matrix substrates: agents walk a walled grid, pick up colored resources by
stepping on them, and resolve a two-player matrix game when one agent uses
``interact`` on a neighbour it is facing. Each agent plays the mixed strategy
given by its L1-normalised inventory; both inventories are emptied afterwards.

Clean Up: agents eat apples (+1) that regrow in an orchard at a rate that falls
linearly with river pollution and stops entirely at the threshold. The river
gets dirtier every tick and ``clean`` next to it removes a fixed amount.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .env_core import Environment, GameSpec, StepOutcome, validate_joint
from .errors import ConfigError, EmptyInventory, SteppedTerminal, UnknownSubstrate

UP, DOWN, LEFT, RIGHT, INTERACT, NOOP, CLEAN = range(7)
MATRIX_ACTIONS = ("up", "down", "left", "right", "interact", "noop")
CLEAN_UP_ACTIONS = MATRIX_ACTIONS + ("clean",)
DIRECTIONS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)

EMPTY, WALL, RIVER = 0, 1, 2


@dataclass(frozen=True)
class PayoffMatrix:
    """Row player's payoffs; the column player's matrix is the transpose."""

    rows: tuple[tuple[float, ...], ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        c = len(self.labels)
        if len(self.rows) != c or any(len(r) != c for r in self.rows):
            raise ConfigError("payoff matrix must be square and match its labels")

    @property
    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)

    @property
    def n_strategies(self) -> int:
        return len(self.labels)


PAYOFFS: dict[str, PayoffMatrix] = {
    "chicken": PayoffMatrix(((3, 2), (5, 0)), ("dove", "hawk")),
    "stag_hunt": PayoffMatrix(((4, 0), (2, 2)), ("stag", "hare")),
    "prisoners_dilemma": PayoffMatrix(((3, 0), (4, 1)), ("cooperate", "defect")),
    "pure_coordination": PayoffMatrix(
        ((1, 0, 0), (0, 1, 0), (0, 0, 1)), ("red", "green", "blue")
    ),
    # shipped exactly as printed, including the off-diagonal 2
    "rational_coordination": PayoffMatrix(
        ((1, 0, 0), (0, 2, 0), (0, 2, 3)), ("red", "green", "blue")
    ),
}
SUBSTRATES = tuple(PAYOFFS) + ("clean_up",)


def resolve_encounter(
    inv_row: np.ndarray, inv_col: np.ndarray, matrix: PayoffMatrix
) -> tuple[float, float]:
    """Resolve one encounter between two inventories.

    Each player receives ``own_strategy @ M @ other_strategy`` where strategies
    are the L1-normalised inventories, so a hawk facing a dove in Chicken gets
    ``M[hawk, dove]`` and the dove gets ``M[dove, hawk]``. Both inventories are
    zeroed in place on success. Raises EmptyInventory (and leaves both
    inventories untouched) when either side holds nothing.
    """
    row_total = inv_row.sum()
    col_total = inv_col.sum()
    if row_total <= 0 or col_total <= 0:
        raise EmptyInventory("encounter needs a resource on both sides")
    p = inv_row / row_total
    q = inv_col / col_total
    m = matrix.array
    reward_row = float(p @ m @ q)
    reward_col = float(q @ m @ p)
    inv_row[...] = 0
    inv_col[...] = 0
    return reward_row, reward_col


@dataclass(frozen=True)
class SubstrateConfig:
    grid_size: int = 9
    n_agents: int | None = None  # 2 for matrix games, 3 for clean_up
    episode_length: int = 200
    discount: float = 0.99
    resources_per_color: int = 4
    respawn_delay: int = 10
    window_radius: int = 2
    # per-color pickup reward; zeros outside pseudo-reward pre-training
    pickup_reward: tuple[float, ...] | None = None
    delta_poll: float = 0.02
    delta_clean: float = 0.1
    threshold: float = 0.6
    beta: float = 0.3

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any] | None) -> "SubstrateConfig":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown substrate config keys: {sorted(unknown)}")
        if values.get("pickup_reward") is not None:
            values["pickup_reward"] = tuple(float(v) for v in values["pickup_reward"])
        return cls(**values)


@dataclass(frozen=True)
class ObsLayout:
    """Where each feature lives inside a flat observation vector."""

    radius: int
    n_colors: int
    has_river: bool
    n_inventory: int
    extra_scalars: int

    WALL_CH = 0
    AGENT_CH = 1
    COLOR_CH0 = 2

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def n_channels(self) -> int:
        return 2 + self.n_colors + (1 if self.has_river else 0)

    @property
    def river_channel(self) -> int | None:
        return 2 + self.n_colors if self.has_river else None

    @property
    def window_size(self) -> int:
        return self.n_channels * self.side * self.side

    @property
    def inventory_offset(self) -> int:
        return self.window_size

    @property
    def orientation_offset(self) -> int:
        return self.window_size + self.n_inventory

    @property
    def time_offset(self) -> int:
        return self.orientation_offset + 4

    @property
    def obs_dim(self) -> int:
        return self.time_offset + 1 + self.extra_scalars

    def window(self, obs: np.ndarray) -> np.ndarray:
        return obs[: self.window_size].reshape(self.n_channels, self.side, self.side)

    def inventory(self, obs: np.ndarray) -> np.ndarray:
        return obs[self.inventory_offset : self.orientation_offset]

    def orientation(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs[self.orientation_offset : self.time_offset]))


@dataclass
class SubstrateState:
    terrain: np.ndarray  # (H, W) EMPTY / WALL / RIVER
    resources: np.ndarray  # (H, W) -1 or color index
    spawners: np.ndarray  # (S, 2) positions
    spawner_colors: np.ndarray  # (S,)
    respawn_timer: np.ndarray  # (S,) ticks until the spawner refills
    positions: np.ndarray  # (N, 2)
    orientations: np.ndarray  # (N,)
    inventories: np.ndarray  # (N, C) int64
    orchard: np.ndarray  # (K, 2) clean_up apple cells, empty otherwise
    rng: np.random.Generator
    pollution: float = 0.0
    step_index: int = 0
    done: bool = False
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self) -> "SubstrateState":
        return copy.deepcopy(self)


def apple_spawn_probability(pollution: float, config: SubstrateConfig) -> float:
    """Per-cell apple regrowth probability; exactly zero at or past the threshold."""
    if pollution >= config.threshold:
        return 0.0
    return config.beta * max(0.0, 1.0 - pollution / config.threshold)


def clean_up_dynamics(
    state: SubstrateState, config: SubstrateConfig, n_cleaning: int = 0
) -> SubstrateState:
    """One tick of river and orchard dynamics, applied to ``state`` in place.

    Cleaning is applied first, then the per-tick pollution increase; both
    clamp to [0, 1]. Empty, unoccupied orchard cells then regrow apples.
    """
    pollution = state.pollution - n_cleaning * config.delta_clean
    pollution = min(1.0, max(0.0, pollution))
    pollution = min(1.0, max(0.0, pollution + config.delta_poll))
    state.pollution = pollution

    prob = apple_spawn_probability(pollution, config)
    draws = state.rng.random(len(state.orchard))
    if prob > 0.0 and len(state.orchard):
        ys, xs = state.orchard[:, 0], state.orchard[:, 1]
        free = state.resources[ys, xs] < 0
        occupied = np.zeros_like(free)
        for y, x in state.positions:
            occupied |= (ys == y) & (xs == x)
        grow = free & ~occupied & (draws < prob)
        state.resources[ys[grow], xs[grow]] = 0
    return state


def _seed_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))


class Substrate(Environment[SubstrateState]):
    """Grid world implementing the env_core interface for one substrate id."""

    def __init__(self, name: str, config: SubstrateConfig | None = None) -> None:
        if name not in SUBSTRATES:
            raise UnknownSubstrate(f"unknown substrate {name!r}; expected one of {SUBSTRATES}")
        config = config or SubstrateConfig()
        self.name = name
        self.is_clean_up = name == "clean_up"
        n_agents = config.n_agents or (3 if self.is_clean_up else 2)
        if config.grid_size < 5:
            raise ConfigError("grid_size must be at least 5")
        self.matrix = None if self.is_clean_up else PAYOFFS[name]
        n_colors = 1 if self.is_clean_up else self.matrix.n_strategies
        pickup = config.pickup_reward or (0.0,) * n_colors
        if len(pickup) != n_colors:
            raise ConfigError(f"pickup_reward needs {n_colors} entries, got {len(pickup)}")
        self.config = replace(config, n_agents=n_agents, pickup_reward=tuple(pickup))
        self.n_colors = n_colors
        self.layout = ObsLayout(
            radius=config.window_radius,
            n_colors=n_colors,
            has_river=self.is_clean_up,
            n_inventory=0 if self.is_clean_up else n_colors,
            extra_scalars=1 if self.is_clean_up else 0,
        )
        self.action_names = CLEAN_UP_ACTIONS if self.is_clean_up else MATRIX_ACTIONS
        self.spec = GameSpec(
            n_agents=n_agents,
            action_count=len(self.action_names),
            obs_dim=self.layout.obs_dim,
            episode_length=config.episode_length,
            discount=config.discount,
        )
        self._interior_free_cells = self._count_free_cells()
        if n_agents + self._required_static_cells() > self._interior_free_cells:
            raise ConfigError("grid too small for the requested agents and spawners")

    # ------------------------------------------------------------------ layout
    def _count_free_cells(self) -> int:
        g = self.config.grid_size
        return (g - 2) * (g - 2) - (g - 2 if self.is_clean_up else 0)

    def _required_static_cells(self) -> int:
        if self.is_clean_up:
            return 3 * (self.config.grid_size - 2)
        return self.n_colors * self.config.resources_per_color

    def reset(self, seed: int) -> tuple[SubstrateState, np.ndarray]:
        rng = _seed_rng(seed)
        g = self.config.grid_size
        n = self.spec.n_agents
        terrain = np.full((g, g), EMPTY, dtype=np.int8)
        terrain[0, :] = terrain[-1, :] = terrain[:, 0] = terrain[:, -1] = WALL
        resources = np.full((g, g), -1, dtype=np.int8)
        interior = np.array([(y, x) for y in range(1, g - 1) for x in range(1, g - 1)])

        if self.is_clean_up:
            terrain[1, 1:-1] = RIVER
            orchard = interior[interior[:, 0] >= g - 4]
            spawn_zone = interior[(interior[:, 0] >= 2) & (interior[:, 0] < g - 4)]
            picks = rng.choice(len(spawn_zone), size=n, replace=False)
            positions = spawn_zone[picks]
            initial = rng.random(len(orchard)) < self.config.beta
            resources[orchard[initial, 0], orchard[initial, 1]] = 0
            spawners = np.zeros((0, 2), dtype=np.int64)
            spawner_colors = np.zeros(0, dtype=np.int64)
        else:
            orchard = np.zeros((0, 2), dtype=np.int64)
            n_spawn = self.n_colors * self.config.resources_per_color
            picks = rng.choice(len(interior), size=n_spawn + n, replace=False)
            spawners = interior[picks[:n_spawn]]
            spawner_colors = np.repeat(np.arange(self.n_colors), self.config.resources_per_color)
            positions = interior[picks[n_spawn:]]
            resources[spawners[:, 0], spawners[:, 1]] = spawner_colors

        state = SubstrateState(
            terrain=terrain,
            resources=resources,
            spawners=spawners.astype(np.int64),
            spawner_colors=spawner_colors.astype(np.int64),
            respawn_timer=np.zeros(len(spawners), dtype=np.int64),
            positions=positions.astype(np.int64),
            orientations=rng.integers(0, 4, size=n).astype(np.int64),
            inventories=np.zeros((n, self.layout.n_inventory), dtype=np.int64),
            orchard=orchard.astype(np.int64),
            rng=rng,
            returns=np.zeros(n),
        )
        return state, self.observe(state)

    # ------------------------------------------------------------- observation
    def observe(self, state: SubstrateState) -> np.ndarray:
        lay = self.layout
        r = lay.radius
        g = self.config.grid_size
        planes = np.zeros((lay.n_channels, g + 2 * r, g + 2 * r), dtype=np.float32)
        planes[lay.WALL_CH] = 1.0
        inner = (slice(r, r + g), slice(r, r + g))
        planes[lay.WALL_CH][inner] = state.terrain == WALL
        if lay.has_river:
            planes[lay.river_channel][inner] = state.terrain == RIVER
        for c in range(lay.n_colors):
            planes[lay.COLOR_CH0 + c][inner] = state.resources == c
        pos = state.positions
        planes[lay.AGENT_CH, pos[:, 0] + r, pos[:, 1] + r] = 1.0

        n = len(pos)
        obs = np.zeros((n, lay.obs_dim), dtype=np.float32)
        side = lay.side
        for i in range(n):
            y, x = pos[i]
            win = planes[:, y : y + side, x : x + side].copy()
            win[lay.AGENT_CH, r, r] = 0.0
            obs[i, : lay.window_size] = win.ravel()
            if lay.n_inventory:
                inv = state.inventories[i]
                total = inv.sum()
                if total > 0:
                    obs[i, lay.inventory_offset : lay.orientation_offset] = inv / total
            obs[i, lay.orientation_offset + state.orientations[i]] = 1.0
            obs[i, lay.time_offset] = state.step_index / self.spec.episode_length
            if lay.extra_scalars:
                obs[i, lay.time_offset + 1] = state.pollution
        return obs

    # -------------------------------------------------------------------- step
    def step(self, state: SubstrateState, joint: Sequence[int]) -> StepOutcome:
        if state.done:
            raise SteppedTerminal("episode already finished; call reset()")
        actions = validate_joint(self.spec, joint)
        n = self.spec.n_agents
        cfg = self.config
        rewards = np.zeros(n, dtype=np.float64)
        pickups: list[tuple[int, int]] = []
        encounters: list[tuple[int, int, float, float]] = []

        occ = np.full(state.terrain.shape, -1, dtype=np.int64)
        occ[state.positions[:, 0], state.positions[:, 1]] = np.arange(n)
        order = state.rng.permutation(n)

        for i in order:
            a = actions[i]
            if a > RIGHT:
                continue
            state.orientations[i] = a
            y, x = state.positions[i]
            ty, tx = y + DIRECTIONS[a, 0], x + DIRECTIONS[a, 1]
            if state.terrain[ty, tx] != EMPTY or occ[ty, tx] >= 0:
                continue
            occ[y, x] = -1
            occ[ty, tx] = i
            state.positions[i] = (ty, tx)
            color = state.resources[ty, tx]
            if color >= 0:
                state.resources[ty, tx] = -1
                pickups.append((int(i), int(color)))
                if self.is_clean_up:
                    rewards[i] += 1.0
                else:
                    state.inventories[i, color] += 1
                    rewards[i] += cfg.pickup_reward[color]
                    hit = np.flatnonzero(
                        (state.spawners[:, 0] == ty) & (state.spawners[:, 1] == tx)
                    )
                    state.respawn_timer[hit] = cfg.respawn_delay

        n_cleaning = 0
        for i in order:
            a = actions[i]
            y, x = state.positions[i]
            if a == INTERACT and not self.is_clean_up:
                o = state.orientations[i]
                j = occ[y + DIRECTIONS[o, 0], x + DIRECTIONS[o, 1]]
                if j < 0:
                    continue
                try:
                    r_i, r_j = resolve_encounter(
                        state.inventories[i], state.inventories[j], self.matrix
                    )
                except EmptyInventory:
                    continue
                rewards[i] += r_i
                rewards[j] += r_j
                encounters.append((int(i), int(j), r_i, r_j))
            elif a == CLEAN and self.is_clean_up:
                near = state.terrain[y + DIRECTIONS[:, 0], x + DIRECTIONS[:, 1]]
                if np.any(near == RIVER):
                    n_cleaning += 1

        if self.is_clean_up:
            clean_up_dynamics(state, cfg, n_cleaning)
        else:
            self._respawn(state, occ)

        state.step_index += 1
        state.done = state.step_index >= self.spec.episode_length
        state.returns = state.returns + rewards
        info = {
            "step_index": state.step_index,
            "pickups": pickups,
            "encounters": encounters,
            "n_cleaning": n_cleaning,
            "pollution": state.pollution,
        }
        return StepOutcome(self.observe(state), rewards, state.done, info)

    def _respawn(self, state: SubstrateState, occ: np.ndarray) -> None:
        timer = state.respawn_timer
        np.subtract(timer, 1, out=timer, where=timer > 0)
        ys, xs = state.spawners[:, 0], state.spawners[:, 1]
        ready = (timer == 0) & (state.resources[ys, xs] < 0) & (occ[ys, xs] < 0)
        state.resources[ys[ready], xs[ready]] = state.spawner_colors[ready]


def build_substrate(name: str, config: Mapping[str, Any] | SubstrateConfig | None = None) -> Substrate:
    """Construct a configured substrate by id (see ``SUBSTRATES``)."""
    if name not in SUBSTRATES:
        raise UnknownSubstrate(f"unknown substrate {name!r}; expected one of {SUBSTRATES}")
    if not isinstance(config, SubstrateConfig):
        config = SubstrateConfig.from_mapping(config)
    return Substrate(name, config)
