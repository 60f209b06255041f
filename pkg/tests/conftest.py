from __future__ import annotations

import pytest

from rpm_marl.config import RunConfig

TINY = {
    "substrate.name": "stag_hunt",
    "substrate.episode_length": 20,
    "model.hidden": [16, 16],
    "model.stack_depth": 2,
    "ppo.batch_size": 4,
    "ppo.buffer_capacity": 8,
    "ppo.minibatch_episodes": 2,
    "ppo.epochs": 1,
    "train.episodes_per_update": 2,
    "train.max_steps": 320,
    "train.eval_interval": 2,
    "eval.episodes_per_eval": 2,
    "train.seed": 3,
}


def tiny(**overrides) -> RunConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return RunConfig.from_mapping(values)


@pytest.fixture
def tiny_config():
    return tiny


# one pass/fail line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
