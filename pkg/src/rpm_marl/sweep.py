"""Grid sweeps over sampler and psi, summarised as one CSV row per run."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import SAMPLER_CHOICES, RunConfig
from .errors import ConfigError
from .orchestrator import TrainResult, run_training

SWEEP_HEADER = (
    "sampler",
    "psi",
    "seed",
    "env_steps",
    "final_train_return",
    "eval_mean_focal_return",
    "rpm_key_count",
    "rpm_snapshot_count",
)
DEFAULT_SAMPLERS = ("rpm", "random", "off")
DEFAULT_PSIS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class SweepCell:
    sampler: str
    psi: float
    seed: int

    @property
    def label(self) -> str:
        return f"{self.sampler}_psi{self.psi:g}_seed{self.seed}"


def sweep_cells(
    samplers: Sequence[str] = DEFAULT_SAMPLERS,
    psis: Sequence[float] = DEFAULT_PSIS,
    seeds: Sequence[int] = (0,),
) -> list[SweepCell]:
    for s in samplers:
        if s not in SAMPLER_CHOICES:
            raise ConfigError(f"unknown sampler {s!r}")
    for p in psis:
        if not p > 0:
            raise ConfigError(f"psi must be positive, got {p}")
    return [SweepCell(s, float(p), int(seed)) for s, p, seed in itertools.product(samplers, psis, seeds)]


def summary_row(cell: SweepCell, result: TrainResult) -> dict[str, Any]:
    store = result.store
    return {
        "sampler": cell.sampler,
        "psi": cell.psi,
        "seed": cell.seed,
        "env_steps": result.env_steps,
        "final_train_return": result.final_snapshot.train_return,
        "eval_mean_focal_return": result.last_eval.mean_focal_return if result.last_eval else None,
        "rpm_key_count": store.key_count if store is not None else 0,
        "rpm_snapshot_count": store.total if store is not None else 0,
    }


def run_sweep(
    base: RunConfig,
    samplers: Sequence[str] = DEFAULT_SAMPLERS,
    psis: Sequence[float] = DEFAULT_PSIS,
    seeds: Sequence[int] = (0,),
    out_dir: str | Path | None = None,
    on_row: Callable[[dict[str, Any]], None] | None = None,
    train: Callable[..., TrainResult] = run_training,
) -> list[dict[str, Any]]:
    """Train every (sampler, psi, seed) cell from ``base`` and collect the final numbers.

    With ``sampler=off`` psi has no effect, but the cell is still run so the
    table keeps its rectangular shape.
    """
    rows = []
    for cell in sweep_cells(samplers, psis, seeds):
        cfg = base.with_overrides({"rpm.sampler": cell.sampler, "rpm.psi": cell.psi, "train.seed": cell.seed})
        run_dir = Path(out_dir) / cell.label if out_dir is not None else None
        row = summary_row(cell, train(cfg, run_dir=run_dir))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def rows_to_csv(rows: Sequence[dict[str, Any]]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=SWEEP_HEADER, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row[k]) for k in SWEEP_HEADER})
    return out.getvalue()
