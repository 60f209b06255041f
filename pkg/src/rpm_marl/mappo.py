"""MAPPO learner: GAE, k-step critic targets, clipped surrogate, replay buffer.

Behaviour log-probabilities are recorded at collection time and used directly
as the denominator of the importance ratio. Episodes played by memory
snapshots therefore train the live policy without re-running any old network.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .errors import BufferTooSmall, ConfigError, LengthMismatch
from .nets import ActorNet, CriticNet, flat_grad, make_leaves


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 10.0


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epsilon: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatch_episodes: int = 15
    k_step: int = 5
    batch_size: int = 60
    buffer_capacity: int = 600
    target_update_interval: int = 200

    def __post_init__(self) -> None:
        if self.k_step < 1:
            raise ConfigError("k_step must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("need 1 <= batch_size <= buffer_capacity")
        if self.minibatch_episodes < 1 or self.epochs < 1:
            raise ConfigError("epochs and minibatch_episodes must be positive")


class Transition(NamedTuple):
    obs: np.ndarray  # (N, D) current local observations
    actions: np.ndarray  # (N,)
    log_prob_behavior: np.ndarray  # (N,)
    rewards: np.ndarray  # (N,)
    step_index: int


@dataclass
class Episode:
    """One fixed-length episode stored as per-field arrays of shape (T, N, ...)."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    behavior_tags: tuple[int, ...]
    worker_id: int = 0
    counter: int = 0
    seed: int = 0
    from_memory: bool = False
    snapshot_keys: tuple[int | None, ...] = ()

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=0, dtype=np.float64)

    def transition(self, t: int) -> Transition:
        return Transition(self.obs[t], self.actions[t], self.log_probs[t], self.rewards[t], t)

    def __iter__(self) -> Iterator[Transition]:
        return (self.transition(t) for t in range(self.length))


@dataclass
class TrajectoryBatch:
    episodes: list[Episode]

    @property
    def snapshot_tags(self) -> list[tuple[int, ...]]:
        return [e.behavior_tags for e in self.episodes]

    def __len__(self) -> int:
        return len(self.episodes)


class ReplayBuffer:
    """FIFO ring of whole episodes."""

    def __init__(self, capacity: int = 600) -> None:
        self.capacity = capacity
        self._items: deque[Episode] = deque(maxlen=capacity)

    def add(self, episode: Episode) -> None:
        self._items.append(episode)

    def extend(self, episodes: Sequence[Episode]) -> None:
        for e in episodes:
            self.add(e)

    def sample(self, n: int, rng: np.random.Generator) -> list[Episode]:
        if len(self._items) < n:
            raise BufferTooSmall(f"buffer holds {len(self._items)} episodes, need {n}")
        idx = np.sort(rng.choice(len(self._items), size=n, replace=False))
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self._items)


# ------------------------------------------------------------------ estimators
def compute_gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates along axis 0.

    ``values`` has one more entry than ``rewards`` (the bootstrap value, zero
    at a true horizon end). Extra trailing axes are treated independently.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1 or v.shape[1:] != r.shape[1:]:
        raise LengthMismatch(f"values shape {v.shape} must be rewards shape {r.shape} plus one step")
    deltas = r + gamma * v[1:] - v[:-1]
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def critic_targets(rewards, target_values, k: int, gamma: float) -> np.ndarray:
    """k-step returns along axis 0, bootstrapped from ``target_values[t + k]``.

    Bootstraps that would land at or past the horizon are dropped, so the
    last step's target is just its reward.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(target_values, dtype=np.float64)
    if v.shape != r.shape:
        raise LengthMismatch(f"target values shape {v.shape} != rewards shape {r.shape}")
    t_len = len(r)
    y = np.zeros_like(r)
    for l in range(min(k, t_len)):
        y[: t_len - l] += gamma**l * r[l:]
    if k < t_len:
        y[: t_len - k] += gamma**k * v[k:]
    return y


def stack_observations(obs: np.ndarray, depth: int, time_axis: int = 0) -> np.ndarray:
    """Concatenate the last ``depth`` frames, newest first, zero-padded at the start."""
    obs = np.moveaxis(np.asarray(obs), time_axis, 0)
    t_len = obs.shape[0]
    out = np.zeros((t_len,) + obs.shape[1:-1] + (depth, obs.shape[-1]), dtype=obs.dtype)
    for k in range(min(depth, t_len)):
        out[k:, ..., k, :] = obs[: t_len - k]
    out = out.reshape(out.shape[:-2] + (depth * obs.shape[-1],))
    return np.moveaxis(out, 0, time_axis)


# ---------------------------------------------------------------------- losses
@dataclass
class PolicyBatch:
    obs_stacks: np.ndarray  # (M, D*depth)
    actions: np.ndarray  # (M,)
    behavior_log_probs: np.ndarray  # (M,)
    advantages: np.ndarray  # (M,)


def policy_loss(
    actor: ActorNet,
    batch: PolicyBatch,
    epsilon: float,
    entropy_coef: float = 0.01,
    leaves: dict[str, Tensor] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Negative clipped surrogate minus the entropy bonus, averaged over rows."""
    dtype = actor.params.flat.dtype
    logits = actor.logits(Tensor(batch.obs_stacks.astype(dtype, copy=False)), leaves)
    logp_all = ad.log_softmax(logits)
    logp = ad.gather(logp_all, batch.actions)
    ratio = ad.exp(logp - Tensor(batch.behavior_log_probs.astype(dtype)))
    adv = Tensor(batch.advantages.astype(dtype))
    unclipped = ratio * adv
    clipped = ad.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv
    surrogate = ad.mean(ad.minimum(unclipped, clipped))
    probs = ad.exp(logp_all)
    entropy = ad.mean(-ad.sum(probs * logp_all, axis=-1))
    loss = -surrogate - entropy_coef * entropy
    r = ratio.data
    stats = {
        "entropy": float(entropy.data),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > epsilon)),
        "ratio_mean": float(r.mean()),
    }
    return loss, stats


def critic_loss(
    critic: CriticNet,
    all_obs: np.ndarray,
    all_actions: np.ndarray,
    targets: np.ndarray,
    leaves: dict[str, Tensor] | None = None,
) -> Tensor:
    """Mean squared error between k-step targets and the live critic's heads."""
    x = Tensor(critic.joint_input(all_obs, all_actions))
    pred = critic.values(x, leaves)
    diff = pred - Tensor(np.asarray(targets, dtype=critic.params.flat.dtype))
    return ad.mean(ad.square(diff))


# --------------------------------------------------------------------- learner
@dataclass
class OptState:
    actor: AdamState
    critic: AdamState
    updates: int = 0
    target_syncs: int = 0

    @classmethod
    def create(cls, actor: ActorNet, critic: CriticNet) -> "OptState":
        return cls(AdamState.zeros_like(actor.params), AdamState.zeros_like(critic.params))


@dataclass
class PreparedBatch:
    stacked: np.ndarray  # (B, T, N, D*depth)
    obs: np.ndarray  # (B, T, N, D)
    actions: np.ndarray  # (B, T, N)
    log_probs: np.ndarray  # (B, T, N)
    advantages: np.ndarray  # (B, T, N), normalised
    targets: np.ndarray  # (B, T, N)
    values: np.ndarray = field(default=None)  # (B, T, N) baseline used for GAE


def prepare_batch(
    episodes: Sequence[Episode], actor: ActorNet, critic: CriticNet, cfg: PPOConfig
) -> PreparedBatch:
    obs = np.stack([e.obs for e in episodes])
    actions = np.stack([e.actions for e in episodes]).astype(np.int64)
    log_probs = np.stack([e.log_probs for e in episodes])
    rewards = np.stack([e.rewards for e in episodes]).astype(np.float64)
    b, t, n, d = obs.shape
    stacked = stack_observations(obs, actor.stack_depth, time_axis=1)

    probs = np.exp(actor.log_probs_np(stacked.reshape(b * t * n, -1))).reshape(b * t, n, -1)
    baseline = critic.marginal_values(
        obs.reshape(b * t, n, d), actions.reshape(b * t, n), probs
    ).reshape(b, t, n)
    values = np.concatenate([baseline, np.zeros((b, 1, n))], axis=1)
    adv = compute_gae(rewards.transpose(1, 0, 2), values.transpose(1, 0, 2), cfg.gamma, cfg.gae_lambda)
    adv = normalize_advantages(adv.transpose(1, 0, 2))

    target_v = critic.value_vector(
        obs.reshape(b * t, n, d), actions.reshape(b * t, n), use_target=True
    ).reshape(b, t, n)
    targets = critic_targets(
        rewards.transpose(1, 0, 2), target_v.transpose(1, 0, 2), cfg.k_step, cfg.gamma
    ).transpose(1, 0, 2)
    return PreparedBatch(stacked, obs, actions, log_probs, adv, targets, baseline)


def learner_update(
    buffer: ReplayBuffer,
    actor: ActorNet,
    critic: CriticNet,
    opt_state: OptState,
    cfg: PPOConfig,
    optim: OptimizerConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Sample a batch of episodes and run ``cfg.epochs`` epochs of minibatch Adam."""
    if len(buffer) < cfg.batch_size:
        raise BufferTooSmall(f"buffer holds {len(buffer)} episodes, need {cfg.batch_size}")
    episodes = buffer.sample(cfg.batch_size, rng)
    prep = prepare_batch(episodes, actor, critic, cfg)
    b = len(episodes)
    adam_kw = dict(
        lr=optim.lr,
        betas=(optim.beta1, optim.beta2),
        eps=optim.eps,
        weight_decay=optim.weight_decay,
        max_grad_norm=optim.max_grad_norm,
    )

    sums = dict(policy_loss=0.0, critic_loss=0.0, entropy=0.0, grad_norm=0.0,
                critic_grad_norm=0.0, clip_fraction=0.0)
    steps = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(b)
        for start in range(0, b, cfg.minibatch_episodes):
            mb = order[start : start + cfg.minibatch_episodes]
            pbatch = PolicyBatch(
                prep.stacked[mb].reshape(-1, prep.stacked.shape[-1]),
                prep.actions[mb].reshape(-1),
                prep.log_probs[mb].reshape(-1),
                prep.advantages[mb].reshape(-1),
            )
            leaves = make_leaves(actor.params)
            ploss, pstats = policy_loss(actor, pbatch, cfg.epsilon, cfg.entropy_coef, leaves)
            ploss.backward()
            gnorm = adam_step(actor.params, flat_grad(actor.params, leaves), opt_state.actor, **adam_kw)

            n, d = prep.obs.shape[2:]
            cleaves = make_leaves(critic.params)
            closs = critic_loss(
                critic,
                prep.obs[mb].reshape(-1, n, d),
                prep.actions[mb].reshape(-1, n),
                prep.targets[mb].reshape(-1, n),
                cleaves,
            )
            closs.backward()
            cnorm = adam_step(critic.params, flat_grad(critic.params, cleaves), opt_state.critic, **adam_kw)

            sums["policy_loss"] += ploss.item()
            sums["critic_loss"] += closs.item()
            sums["entropy"] += pstats["entropy"]
            sums["clip_fraction"] += pstats["clip_fraction"]
            sums["grad_norm"] += gnorm
            sums["critic_grad_norm"] += cnorm
            steps += 1

    opt_state.updates += 1
    if opt_state.updates % cfg.target_update_interval == 0:
        critic.sync_target()
        opt_state.target_syncs += 1
    metrics = {k: v / steps for k, v in sums.items()}
    metrics["updates"] = opt_state.updates
    return metrics
