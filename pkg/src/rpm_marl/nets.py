"""Shared actor MLP and N-head central critic.

The actor maps a stack of the last ``stack_depth`` local observations to
action logits and is shared by every agent. The critic sees all agents'
current observations together with their one-hot actions and predicts one
value per agent.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor
from .errors import ArchMismatch, ShapeMismatch


def orthogonal(fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_gain: float, dtype=np.float32) -> ParamVector:
    named = []
    n_layers = len(sizes) - 1
    for li, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if li == n_layers - 1 else np.sqrt(2.0)
        named.append((f"l{li}.w", orthogonal(fi, fo, rng, gain)))
        named.append((f"l{li}.b", np.zeros(fo)))
    return ParamVector.from_arrays(named, dtype=dtype)


def mlp_numpy(params: ParamVector, x: np.ndarray) -> np.ndarray:
    v = params.views()
    n_layers = len(params.layout) // 2
    h = x
    for li in range(n_layers):
        h = h @ v[f"l{li}.w"] + v[f"l{li}.b"]
        if li < n_layers - 1:
            np.maximum(h, 0, out=h)
    return h


def mlp_graph(params: ParamVector, x: Tensor, leaves: dict[str, Tensor] | None) -> Tensor:
    n_layers = len(params.layout) // 2
    src = leaves if leaves is not None else {k: Tensor(v) for k, v in params.views().items()}
    h = x
    for li in range(n_layers):
        h = ad.matmul(h, src[f"l{li}.w"]) + src[f"l{li}.b"]
        if li < n_layers - 1:
            h = ad.relu(h)
    return h


def make_leaves(params: ParamVector) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.views().items()}


def flat_grad(params: ParamVector, leaves: dict[str, Tensor]) -> np.ndarray:
    parts = []
    for e in params.layout:
        g = leaves[e.name].grad
        parts.append(np.zeros(e.size, params.flat.dtype) if g is None else g.ravel())
    return np.concatenate(parts)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def descriptor_text(descriptor: dict[str, Any]) -> str:
    return json.dumps(descriptor, sort_keys=True, separators=(",", ":"))


def descriptor_digest(descriptor: dict[str, Any]) -> str:
    return hashlib.sha256(descriptor_text(descriptor).encode()).hexdigest()[:16]


class ActorNet:
    """Shared policy: obs stack -> 64 -> 64 -> logits."""

    def __init__(
        self,
        obs_dim: int,
        action_count: int,
        stack_depth: int = 4,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        params: ParamVector | None = None,
    ) -> None:
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.stack_depth = stack_depth
        self.hidden = tuple(hidden)
        sizes = [obs_dim * stack_depth, *self.hidden, action_count]
        if params is None:
            params = init_mlp(sizes, np.random.default_rng(seed), out_gain=0.01)
        expected = sum((a * b + b) for a, b in zip(sizes[:-1], sizes[1:]))
        if len(params) != expected:
            raise ArchMismatch(f"actor expects {expected} parameters, got {len(params)}")
        self.params = params

    @property
    def input_dim(self) -> int:
        return self.obs_dim * self.stack_depth

    @property
    def descriptor(self) -> dict[str, Any]:
        return {
            "kind": "actor",
            "obs_dim": self.obs_dim,
            "stack_depth": self.stack_depth,
            "hidden": list(self.hidden),
            "action_count": self.action_count,
            "activation": "relu",
        }

    @property
    def arch_digest(self) -> str:
        return descriptor_digest(self.descriptor)

    @classmethod
    def from_descriptor(cls, descriptor: dict[str, Any], params: ParamVector) -> "ActorNet":
        if descriptor.get("kind") != "actor":
            raise ArchMismatch(f"not an actor descriptor: {descriptor.get('kind')!r}")
        return cls(
            descriptor["obs_dim"],
            descriptor["action_count"],
            descriptor["stack_depth"],
            descriptor["hidden"],
            params=params,
        )

    def with_params(self, params: ParamVector) -> "ActorNet":
        return ActorNet(self.obs_dim, self.action_count, self.stack_depth, self.hidden, params=params)

    def logits_np(self, obs_stack: np.ndarray, params: ParamVector | None = None) -> np.ndarray:
        return mlp_numpy(params or self.params, obs_stack)

    def log_probs_np(self, obs_stack: np.ndarray, params: ParamVector | None = None) -> np.ndarray:
        return log_softmax_np(self.logits_np(obs_stack, params))

    def logits(self, obs_stack: Tensor, leaves: dict[str, Tensor] | None = None) -> Tensor:
        if obs_stack.shape[-1] != self.input_dim:
            raise ShapeMismatch(f"actor input needs {self.input_dim} features, got {obs_stack.shape[-1]}")
        return mlp_graph(self.params, obs_stack, leaves)

    def act(
        self, obs_stack: np.ndarray, rng: np.random.Generator, greedy: bool = False
    ) -> tuple[int, float]:
        """Sample (or argmax) one action; returns (action, log_prob)."""
        x = np.asarray(obs_stack, dtype=self.params.flat.dtype).reshape(1, -1)
        if x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"actor input needs {self.input_dim} features, got {x.shape[1]}")
        logp = self.log_probs_np(x)[0]
        a = int(np.argmax(logp)) if greedy else sample_categorical(logp[None], rng)[0]
        return a, float(logp[a])


def sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    probs = np.exp(logp.astype(np.float64))
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(len(logp)) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, logp.shape[-1] - 1)


class CriticNet:
    """Central critic over all agents' (observation, one-hot action) pairs."""

    def __init__(
        self,
        obs_dim: int,
        action_count: int,
        n_agents: int,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
    ) -> None:
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.n_agents = n_agents
        self.hidden = tuple(hidden)
        sizes = [n_agents * (obs_dim + action_count), *self.hidden, n_agents]
        self.params = init_mlp(sizes, np.random.default_rng(seed), out_gain=1.0)
        self.target_params = self.params.copy()

    @property
    def descriptor(self) -> dict[str, Any]:
        return {
            "kind": "critic",
            "obs_dim": self.obs_dim,
            "action_count": self.action_count,
            "n_agents": self.n_agents,
            "hidden": list(self.hidden),
        }

    def joint_input(self, all_obs: np.ndarray, all_actions: np.ndarray) -> np.ndarray:
        """(M, N, D) observations and (M, N) actions -> (M, N*(D+A)) input rows."""
        all_obs = np.asarray(all_obs)
        all_actions = np.asarray(all_actions)
        if all_obs.ndim == 2:
            all_obs, all_actions = all_obs[None], all_actions[None]
        m, n, d = all_obs.shape
        if n != self.n_agents or d != self.obs_dim or all_actions.shape != (m, n):
            raise ShapeMismatch(
                f"critic needs ({self.n_agents}, {self.obs_dim}) obs and {self.n_agents} actions, "
                f"got {all_obs.shape[1:]} and {all_actions.shape[1:]}"
            )
        onehot = np.zeros((m, n, self.action_count), dtype=self.params.flat.dtype)
        np.put_along_axis(onehot, all_actions[..., None].astype(np.int64), 1.0, axis=-1)
        x = np.concatenate([all_obs.astype(self.params.flat.dtype), onehot], axis=-1)
        return x.reshape(m, n * (d + self.action_count))

    def value_vector(
        self, all_obs: np.ndarray, all_actions: np.ndarray, use_target: bool = False
    ) -> np.ndarray:
        """N-head value estimate; batched if inputs carry a leading dimension."""
        single = np.asarray(all_obs).ndim == 2
        params = self.target_params if use_target else self.params
        out = mlp_numpy(params, self.joint_input(all_obs, all_actions))
        return out[0] if single else out

    def values(self, x: Tensor, leaves: dict[str, Tensor] | None = None) -> Tensor:
        return mlp_graph(self.params, x, leaves)

    def marginal_values(
        self, all_obs: np.ndarray, all_actions: np.ndarray, probs: np.ndarray
    ) -> np.ndarray:
        """Per-agent value with the agent's own action averaged out under ``probs``.

        ``out[m, i] = sum_a probs[m, i, a] * V(obs, actions with u_i := a)[i]``.
        The first layer is linear in the one-hot action, so the shared
        pre-activation is computed once and only the action rows are swapped.
        """
        v = self.params.views()
        w0, b0 = v["l0.w"], v["l0.b"]
        n_layers = len(self.params.layout) // 2
        x = self.joint_input(all_obs, all_actions)
        base = x @ w0 + b0
        m = len(x)
        d, a_count = self.obs_dim, self.action_count
        out = np.zeros((m, self.n_agents), dtype=np.float64)
        for i in range(self.n_agents):
            rows = w0[i * (d + a_count) + d : (i + 1) * (d + a_count)]
            stripped = base - rows[np.asarray(all_actions)[:, i]]
            for a in range(a_count):
                h = np.maximum(stripped + rows[a], 0)
                for li in range(1, n_layers):
                    h = h @ v[f"l{li}.w"] + v[f"l{li}.b"]
                    if li < n_layers - 1:
                        np.maximum(h, 0, out=h)
                out[:, i] += probs[:, i, a] * h[:, i]
        return out

    def sync_target(self) -> None:
        self.target_params.assign(self.params)
