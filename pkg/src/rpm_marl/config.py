"""Run configuration: a validated flat mapping of dotted keys.

Config files are YAML (JSON is accepted too) and may be written either flat
(``rpm.psi: 1``) or nested (``rpm: {psi: 1}``); both flatten to the same keys.
``--override key=value`` values are parsed as YAML scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import ConfigError
from .mappo import OptimizerConfig, PPOConfig
from .substrates import SUBSTRATES, SubstrateConfig

# ψ per substrate, from the published settings table
DEFAULT_PSI = {
    "stag_hunt": 1.0,
    "pure_coordination": 0.01,
    "clean_up": 1.0,
    "prisoners_dilemma": 0.02,
    "rational_coordination": 0.2,
    "chicken": 1.0,
}
SAMPLER_CHOICES = ("rpm", "hfsp", "random", "off")

DEFAULTS: dict[str, Any] = {
    "substrate.name": "stag_hunt",
    "substrate.grid_size": 9,
    "substrate.n_agents": None,
    "substrate.episode_length": 200,
    "substrate.resources_per_color": 4,
    "substrate.respawn_delay": 10,
    "substrate.pickup_reward": None,
    "substrate.delta_poll": 0.02,
    "substrate.delta_clean": 0.1,
    "substrate.threshold": 0.6,
    "substrate.beta": 0.3,
    "rpm.sampler": "rpm",
    "rpm.psi": None,
    "rpm.p": 0.5,
    "rpm.literal_key": False,
    "rpm.snapshot_budget": 2048,
    "optimizer.lr": 1e-4,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.999,
    "optimizer.eps": 1e-8,
    "optimizer.weight_decay": 0.0,
    "optimizer.max_grad_norm": 10.0,
    "ppo.gamma": 0.99,
    "ppo.gae_lambda": 0.95,
    "ppo.epsilon": 0.2,
    "ppo.entropy_coef": 0.01,
    "ppo.epochs": 4,
    "ppo.minibatch_episodes": 15,
    "ppo.k_step": 5,
    "ppo.batch_size": 60,
    "ppo.buffer_capacity": 600,
    "ppo.target_update_interval": 200,
    "model.stack_depth": 4,
    "model.hidden": [64, 64],
    "train.max_steps": 500_000,
    "train.n_workers": 1,
    "train.episodes_per_update": 4,
    "train.eval_interval": 1000,
    "train.seed": 0,
    "train.queue_size": 8,
    "train.worker_timeout": 600.0,
    "train.debug_trace": False,
    "train.run_dir": None,
    "eval.scenario": None,
    "eval.episodes_per_eval": 30,
    "eval.greedy": False,
}

# keys whose default is None still need a type for override coercion
_NULLABLE_TYPES = {
    "substrate.n_agents": int,
    "substrate.pickup_reward": list,
    "rpm.psi": float,
    "train.run_dir": str,
    "eval.scenario": str,
}


def flatten(mapping: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, full + "."))
        else:
            flat[full] = value
    return flat


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    default = DEFAULTS[key]
    kind = _NULLABLE_TYPES.get(key) or type(default)
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is list:
            return list(value)
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from exc


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any] | None = None) -> "RunConfig":
        merged = dict(DEFAULTS)
        for key, value in flatten(values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        values = dict(self.values)
        values.update(overrides)
        return RunConfig.from_mapping(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # ------------------------------------------------------------- sections
    @property
    def substrate_name(self) -> str:
        return self.values["substrate.name"]

    @property
    def psi(self) -> float:
        psi = self.values["rpm.psi"]
        return DEFAULT_PSI[self.substrate_name] if psi is None else psi

    @property
    def sampler(self) -> str:
        return self.values["rpm.sampler"]

    @property
    def scenario_name(self) -> str:
        return self.values["eval.scenario"] or f"{self.substrate_name}_eval"

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def substrate_config(self) -> SubstrateConfig:
        sec = self.section("substrate")
        sec.pop("name")
        return SubstrateConfig.from_mapping(sec)

    def ppo(self) -> PPOConfig:
        return PPOConfig(**self.section("ppo"))

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self.section("optimizer"))

    def validate(self) -> None:
        v = self.values
        if v["substrate.name"] not in SUBSTRATES:
            raise ConfigError(f"substrate.name must be one of {SUBSTRATES}")
        if v["rpm.sampler"] not in SAMPLER_CHOICES:
            raise ConfigError(f"rpm.sampler must be one of {SAMPLER_CHOICES}")
        if not 0.0 <= v["rpm.p"] <= 1.0:
            raise ConfigError("rpm.p must lie in [0, 1]")
        if not self.psi > 0:
            raise ConfigError("rpm.psi must be positive")
        if v["train.n_workers"] < 1:
            raise ConfigError("train.n_workers must be >= 1")
        if v["train.max_steps"] < 1:
            raise ConfigError("train.max_steps must be >= 1")
        if v["train.episodes_per_update"] < 1:
            raise ConfigError("train.episodes_per_update must be >= 1")
        if v["train.eval_interval"] < 1:
            raise ConfigError("train.eval_interval must be >= 1")
        if v["model.stack_depth"] < 1:
            raise ConfigError("model.stack_depth must be >= 1")
        self.ppo()
        self.optimizer()
        self.substrate_config()

    def to_yaml(self) -> str:
        return yaml.safe_dump(dict(self.values), sort_keys=True)


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from exc
    return out


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{p} must contain a mapping of config keys")
        values = flatten(loaded)
    values.update(parse_overrides(overrides))
    return RunConfig.from_mapping(values)
