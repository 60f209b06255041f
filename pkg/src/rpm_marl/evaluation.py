"""Focal/background evaluation scenarios.

A scenario fills the first ``n_focal`` seats with the policy under test and the
remaining seats with fixed background policies (scripted bots or frozen
checkpoints). Which environment agent each seat drives is permuted per episode
from the scenario seed, so focal agents do not always spawn in the same slot.
Nothing is learned during evaluation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .errors import ArchMismatch, ConfigError, UnknownScenario
from .nets import ActorNet, sample_categorical
from .rpm_store import Snapshot
from .substrates import (
    CLEAN,
    DIRECTIONS,
    INTERACT,
    NOOP,
    ObsLayout,
    Substrate,
    build_substrate,
)


@dataclass(frozen=True)
class ScriptedStrategy:
    """``collect``: chase one resource color and interact; ``clean``: tend the river."""

    mode: str = "collect"
    target_color: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("collect", "clean"):
            raise ConfigError(f"unknown scripted mode {self.mode!r}")


@dataclass(frozen=True)
class BackgroundPolicy:
    kind: str = "scripted"
    strategy: ScriptedStrategy | None = ScriptedStrategy()
    snapshot_ref: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("scripted", "snapshot"):
            raise ConfigError(f"background kind must be scripted or snapshot, got {self.kind!r}")
        if self.kind == "snapshot" and not self.snapshot_ref:
            raise ConfigError("snapshot background needs snapshot_ref")
        if self.kind == "scripted" and self.strategy is None:
            raise ConfigError("scripted background needs a strategy")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    substrate: str
    n_focal: int
    background: tuple[BackgroundPolicy, ...]
    episodes_per_eval: int = 30
    seed_base: int = 1_000_003
    substrate_config: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.n_focal + len(self.background)

    def validate(self, n_agents: int) -> None:
        if not 1 <= self.n_focal <= n_agents - 1:
            raise ConfigError(f"need 1 <= n_focal <= {n_agents - 1}, got {self.n_focal}")
        if self.n_agents != n_agents:
            raise ConfigError(
                f"scenario {self.name} fills {self.n_agents} seats but the substrate has {n_agents}"
            )
        if self.episodes_per_eval < 1:
            raise ConfigError("episodes_per_eval must be positive")


def _scripted(color: int = 0, mode: str = "collect") -> BackgroundPolicy:
    return BackgroundPolicy("scripted", ScriptedStrategy(mode, color))


SCENARIOS: dict[str, ScenarioSpec] = {
    "stag_hunt_eval": ScenarioSpec("stag_hunt_eval", "stag_hunt", 1, (_scripted(0),)),
    "chicken_eval": ScenarioSpec("chicken_eval", "chicken", 1, (_scripted(0),)),
    "prisoners_dilemma_eval": ScenarioSpec(
        "prisoners_dilemma_eval", "prisoners_dilemma", 1, (_scripted(0),)
    ),
    "pure_coordination_eval": ScenarioSpec(
        "pure_coordination_eval", "pure_coordination", 1, (_scripted(0),)
    ),
    "rational_coordination_eval": ScenarioSpec(
        "rational_coordination_eval", "rational_coordination", 1, (_scripted(0),)
    ),
    "clean_up_eval": ScenarioSpec(
        "clean_up_eval", "clean_up", 1, (_scripted(mode="clean"), _scripted(mode="clean"))
    ),
}


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None


# ---------------------------------------------------------------- scripted bot
_MOVES = (0, 1, 2, 3)


def _bfs_first_step(passable: np.ndarray, goal: np.ndarray, start: tuple[int, int]) -> int | None:
    """Direction of the first move on a shortest path to any goal cell."""
    side = passable.shape[0]
    seen = np.zeros_like(passable, dtype=bool)
    seen[start] = True
    frontier: deque[tuple[int, int, int]] = deque()
    for d in _MOVES:
        y, x = start[0] + DIRECTIONS[d, 0], start[1] + DIRECTIONS[d, 1]
        if 0 <= y < side and 0 <= x < side and passable[y, x]:
            seen[y, x] = True
            frontier.append((y, x, d))
    while frontier:
        y, x, first = frontier.popleft()
        if goal[y, x]:
            return first
        for d in _MOVES:
            ny, nx = y + DIRECTIONS[d, 0], x + DIRECTIONS[d, 1]
            if 0 <= ny < side and 0 <= nx < side and passable[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                frontier.append((ny, nx, first))
    return None


def _random_walk(rng: np.random.Generator, free: np.ndarray, r: int) -> int:
    """Uniform over NOOP and the moves into free neighbouring cells."""
    options = [d for d in _MOVES if free[r + DIRECTIONS[d, 0], r + DIRECTIONS[d, 1]]]
    options.append(NOOP)
    return int(options[rng.integers(len(options))])


def scripted_bot_policy(
    strategy: ScriptedStrategy, observation: np.ndarray, rng: np.random.Generator, layout: ObsLayout
) -> int:
    """Deterministic-given-RNG background bot acting on one local observation.

    The bot stays committed to its color: paths and random-walk moves avoid
    cells holding other resource colors whenever an alternative exists.
    """
    win = layout.window(observation)
    r = layout.radius
    center = (r, r)
    blocked = (win[layout.WALL_CH] > 0) | (win[layout.AGENT_CH] > 0)
    river = win[layout.river_channel] > 0 if layout.has_river else np.zeros_like(blocked)
    passable = ~blocked & ~river
    other = np.zeros_like(blocked)
    for c in range(layout.n_colors):
        if strategy.mode == "clean" or c != strategy.target_color:
            other |= win[layout.COLOR_CH0 + c] > 0
    committed = passable & ~other

    def route(goal: np.ndarray) -> int:
        step = _bfs_first_step(committed, goal & committed, center)
        if step is None:
            step = _bfs_first_step(passable, goal & passable, center)
        return step if step is not None else _random_walk(rng, committed, r)

    if strategy.mode == "clean":
        near_river = any(
            river[r + DIRECTIONS[d, 0], r + DIRECTIONS[d, 1]] for d in _MOVES
        )
        if near_river:
            return CLEAN
        padded = np.pad(river, 1)
        touches = padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
        return route(touches)

    o = layout.orientation(observation)
    fy, fx = r + DIRECTIONS[o, 0], r + DIRECTIONS[o, 1]
    if win[layout.AGENT_CH, fy, fx] > 0 and layout.inventory(observation).sum() > 0:
        return INTERACT
    return route(win[layout.COLOR_CH0 + strategy.target_color] > 0)


# ------------------------------------------------------------------ seat policies
class SeatPolicy:
    def begin(self, rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self, obs: np.ndarray) -> int:
        raise NotImplementedError


class ActorSeat(SeatPolicy):
    def __init__(self, actor: ActorNet, greedy: bool = False) -> None:
        self.actor = actor
        self.greedy = greedy

    def begin(self, rng: np.random.Generator) -> None:
        super().begin(rng)
        self.frames = np.zeros((self.actor.stack_depth, self.actor.obs_dim), dtype=np.float32)

    def act(self, obs: np.ndarray) -> int:
        self.frames[1:] = self.frames[:-1]
        self.frames[0] = obs
        logp = self.actor.log_probs_np(self.frames.reshape(1, -1))
        if self.greedy:
            return int(np.argmax(logp[0]))
        return int(sample_categorical(logp, self.rng)[0])


class UniformRandomSeat(SeatPolicy):
    def __init__(self, action_count: int) -> None:
        self.action_count = action_count

    def act(self, obs: np.ndarray) -> int:
        return int(self.rng.integers(self.action_count))


class ScriptedSeat(SeatPolicy):
    def __init__(self, strategy: ScriptedStrategy, layout: ObsLayout) -> None:
        self.strategy = strategy
        self.layout = layout

    def act(self, obs: np.ndarray) -> int:
        return scripted_bot_policy(self.strategy, obs, self.rng, self.layout)


class RandomPolicy:
    """Marker for a uniform-random focal policy (the evaluation baseline)."""


def _check_arch(actor: ActorNet, env: Substrate) -> None:
    if actor.obs_dim != env.spec.obs_dim or actor.action_count != env.spec.action_count:
        raise ArchMismatch(
            f"policy expects obs_dim={actor.obs_dim}, actions={actor.action_count}; "
            f"substrate {env.name} has obs_dim={env.spec.obs_dim}, actions={env.spec.action_count}"
        )


def focal_actor(focal: Any) -> ActorNet | RandomPolicy | ScriptedStrategy:
    if isinstance(focal, (ActorNet, RandomPolicy, ScriptedStrategy)):
        return focal
    if isinstance(focal, Snapshot):
        if focal.descriptor is None:
            raise ArchMismatch("snapshot carries no architecture descriptor")
        return ActorNet.from_descriptor(focal.descriptor, focal.params)
    raise TypeError(f"cannot evaluate focal policy of type {type(focal).__name__}")


def background_seat(bg: BackgroundPolicy, env: Substrate, greedy: bool) -> SeatPolicy:
    if bg.kind == "scripted":
        return ScriptedSeat(bg.strategy, env.layout)
    ckpt = load_checkpoint(bg.snapshot_ref)
    actor = ActorNet.from_descriptor(ckpt.architecture, ckpt.params)
    _check_arch(actor, env)
    return ActorSeat(actor, greedy)


# ------------------------------------------------------------------ reports
@dataclass
class EpisodeRecord:
    episode: int
    seed: int
    seat_to_agent: list[int]
    seat_returns: list[float]


@dataclass
class EvalReport:
    scenario: str
    n_focal: int
    mean_focal_return: float
    per_agent_returns: list[float]
    per_episode: list[EpisodeRecord]
    seeds: list[int]

    def recompute_mean(self) -> float:
        focal = [ep.seat_returns[: self.n_focal] for ep in self.per_episode]
        return float(np.mean(np.mean(np.asarray(focal), axis=0)))


def aggregate(scenario: str, n_focal: int, records: Sequence[EpisodeRecord]) -> EvalReport:
    returns = np.asarray([r.seat_returns for r in records], dtype=np.float64)
    per_seat = returns.mean(axis=0)
    return EvalReport(
        scenario=scenario,
        n_focal=n_focal,
        mean_focal_return=float(per_seat[:n_focal].mean()),
        per_agent_returns=per_seat.tolist(),
        per_episode=list(records),
        seeds=[r.seed for r in records],
    )


def run_evaluation(
    focal: Any,
    scenario: ScenarioSpec | str,
    greedy: bool = False,
    episodes: int | None = None,
    substrate_config: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Play ``episodes_per_eval`` episodes of the scenario and report focal returns.

    ``focal`` is an ActorNet, a Snapshot carrying its descriptor, a
    ScriptedStrategy, or ``RandomPolicy()``. Parameters are only read; all randomness comes from
    streams derived from ``scenario.seed_base``.
    """
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    env_cfg = dict(scenario.substrate_config)
    env_cfg.update(substrate_config or {})
    env_cfg.setdefault("n_agents", scenario.n_agents)
    env = build_substrate(scenario.substrate, env_cfg)
    n = env.spec.n_agents
    scenario.validate(n)

    policy = focal_actor(focal)
    if isinstance(policy, ActorNet):
        _check_arch(policy, env)
    seats: list[SeatPolicy] = []
    for _ in range(scenario.n_focal):
        if isinstance(policy, RandomPolicy):
            seats.append(UniformRandomSeat(env.spec.action_count))
        elif isinstance(policy, ScriptedStrategy):
            seats.append(ScriptedSeat(policy, env.layout))
        else:
            seats.append(ActorSeat(policy, greedy))
    seats.extend(background_seat(bg, env, greedy) for bg in scenario.background)

    n_episodes = episodes if episodes is not None else scenario.episodes_per_eval
    records = []
    for ep in range(n_episodes):
        ss = np.random.SeedSequence([scenario.seed_base, ep])
        perm_rng, *seat_ss = [np.random.default_rng(s) for s in ss.spawn(n + 1)]
        env_seed = scenario.seed_base + ep
        seat_to_agent = perm_rng.permutation(n)
        for seat, rng in zip(seats, seat_ss):
            seat.begin(rng)
        state, obs = env.reset(env_seed)
        totals = np.zeros(n)
        while not state.done:
            joint = np.zeros(n, dtype=np.int64)
            for s, seat in enumerate(seats):
                joint[seat_to_agent[s]] = seat.act(obs[seat_to_agent[s]])
            out = env.step(state, joint)
            totals += out.rewards
            obs = out.observations
        records.append(
            EpisodeRecord(ep, env_seed, seat_to_agent.tolist(), totals[seat_to_agent].tolist())
        )
    return aggregate(scenario.name, scenario.n_focal, records)


def train_background(
    substrate: str,
    pseudo_reward_mask: Sequence[int],
    out_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Snapshot:
    """Pre-train a background policy that is paid +1 for picking up masked colors.

    Encounter rewards are kept. A mask covering every color leaves the
    substrate reward unchanged. The resulting snapshot is written as a
    checkpoint when ``out_path`` is given.
    """
    from .config import RunConfig
    from .orchestrator import run_training, snapshot_checkpoint
    from .checkpoint import save_checkpoint

    mask = sorted(set(int(c) for c in pseudo_reward_mask))
    if not mask:
        raise ConfigError("pseudo-reward mask must select at least one color")
    probe = build_substrate(substrate)
    if probe.is_clean_up:
        raise ConfigError("pseudo-reward pre-training needs a matrix substrate")
    n_colors = probe.n_colors
    if any(c < 0 or c >= n_colors for c in mask):
        raise ConfigError(f"mask colors must lie in [0, {n_colors})")
    values = {"substrate.name": substrate, "rpm.sampler": "off"}
    if len(mask) < n_colors:
        values["substrate.pickup_reward"] = [1.0 if c in mask else 0.0 for c in range(n_colors)]
    values.update(overrides or {})
    result = run_training(RunConfig.from_mapping(values))
    if out_path is not None:
        save_checkpoint(out_path, snapshot_checkpoint(result.final_snapshot, {"pseudo_reward_mask": mask}))
    return result.final_snapshot
