"""Ranked policy memory: return-bucketed snapshots of the shared policy.

Keys are integer bucket indices; key ``k`` holds every snapshot whose
measured training return ``R`` satisfies ``k * psi <= R < (k + 1) * psi``.
The comparison is done in exact rational arithmetic on the float inputs, so
the bucket invariant holds even where ``R / psi`` rounds across an integer.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational, Real
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ParamVector
from .errors import ArchMismatch, EmptyStore, NonpositivePsi

HFSP_LATEST_PROB = 0.7


def _ratio(x: Real) -> tuple[int, int]:
    if isinstance(x, Rational):
        return x.numerator, x.denominator
    return float(x).as_integer_ratio()


def canonical_key(R: Real, psi: Real, literal: bool = False) -> int:
    """Bucket index ``floor(R / psi)`` computed exactly.

    With ``literal=True`` the printed discretisation formula is applied
    literally: a non-negative return that is an exact multiple of ``psi``
    lands in bucket 0 because of its indicator factor.
    """
    if not psi > 0:
        raise NonpositivePsi(f"psi must be positive, got {psi}")
    if isinstance(R, float) and not math.isfinite(R):
        raise ValueError(f"return must be finite, got {R}")
    a, b = _ratio(R)
    c, d = _ratio(psi)
    num, den = a * d, b * c  # R / psi == num / den, den > 0
    key = num // den
    if literal and R >= 0 and num % den == 0:
        return 0
    return key


def bucket_bounds(key: int, psi: Real) -> tuple[Fraction, Fraction]:
    p = Fraction(psi)
    return key * p, (key + 1) * p


class _SpilledParams:
    """Parameters parked on disk; loaded on every access."""

    def __init__(self, path: Path, layout, tag: int) -> None:
        self.path = path
        self.layout = layout
        self.tag = tag

    def load(self) -> ParamVector:
        pv = ParamVector(np.load(self.path), self.layout, tag=self.tag)
        pv.flat.setflags(write=False)
        return pv


@dataclass(frozen=True)
class Snapshot:
    """Immutable copy of the shared policy plus the return it was ranked by."""

    _params: ParamVector | _SpilledParams = field(repr=False)
    arch_digest: str
    train_return: float
    key: int
    created_at: int
    seq: int = 0
    descriptor: dict | None = field(default=None, compare=False, repr=False)

    @property
    def params(self) -> ParamVector:
        p = self._params
        return p.load() if isinstance(p, _SpilledParams) else p

    @property
    def tag(self) -> int:
        return self._params.tag

    @property
    def spilled(self) -> bool:
        return isinstance(self._params, _SpilledParams)


@dataclass(frozen=True)
class _Index:
    keys: tuple[int, ...] = ()
    lists: tuple[tuple[Snapshot, ...], ...] = ()
    flat: tuple[Snapshot, ...] = ()
    latest: Snapshot | None = None


class RpmStore:
    """Append-only map from bucket key to the snapshots ranked there.

    The learner is the single writer. Readers sample from an immutable index
    that is swapped in atomically after each append.
    """

    def __init__(
        self,
        psi: float,
        arch_digest: str | None = None,
        literal: bool = False,
        snapshot_budget: int = 2048,
        spill_dir: str | Path | None = None,
    ) -> None:
        if not psi > 0:
            raise NonpositivePsi(f"psi must be positive, got {psi}")
        self.psi = psi
        self.arch_digest = arch_digest
        self.literal = literal
        self.snapshot_budget = snapshot_budget
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.ranks: dict[int, list[Snapshot]] = {}
        self._index = _Index()
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        return len(self._index.flat)

    @property
    def key_count(self) -> int:
        return len(self._index.keys)

    @property
    def index(self) -> _Index:
        return self._index

    def __len__(self) -> int:
        return self.total

    def key_for(self, train_return: float) -> int:
        return canonical_key(train_return, self.psi, self.literal)

    def update(
        self,
        params: ParamVector,
        train_return: float,
        created_at: int,
        arch_digest: str | None = None,
        descriptor: dict | None = None,
    ) -> Snapshot:
        digest = arch_digest or self.arch_digest
        if self.arch_digest is None:
            self.arch_digest = digest
        elif digest != self.arch_digest:
            raise ArchMismatch(f"snapshot architecture {digest} != store architecture {self.arch_digest}")
        key = self.key_for(train_return)
        frozen = params if params.frozen else params.freeze()
        payload: ParamVector | _SpilledParams = frozen
        if self.spill_dir is not None and self.total >= self.snapshot_budget:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            path = self.spill_dir / f"snapshot_{self.total:06d}.npy"
            np.save(path, frozen.flat)
            payload = _SpilledParams(path, frozen.layout, frozen.tag)
        snap = Snapshot(payload, digest or "", float(train_return), key, created_at, self.total, descriptor)
        with self._lock:
            self.ranks.setdefault(key, []).append(snap)
            keys = tuple(sorted(self.ranks))
            self._index = _Index(
                keys=keys,
                lists=tuple(tuple(self.ranks[k]) for k in keys),
                flat=self._index.flat + (snap,),
                latest=_newer(self._index.latest, snap),
            )
        return snap

    def check_invariants(self) -> None:
        """Assert bucket membership and bookkeeping; used by tests and debug runs."""
        idx = self._index
        assert sum(len(v) for v in idx.lists) == len(idx.flat)
        for key, snaps in zip(idx.keys, idx.lists):
            for s in snaps:
                assert s.key == key
                if not self.literal:
                    lo, hi = bucket_bounds(key, self.psi)
                    assert lo <= Fraction(s.train_return) < hi, (s.train_return, key)

    def summary_rows(self) -> list[dict]:
        rows = []
        for key, snaps in zip(self._index.keys, self._index.lists):
            rets = [s.train_return for s in snaps]
            made = [s.created_at for s in snaps]
            rows.append(
                {
                    "key": key,
                    "count": len(snaps),
                    "min_return": min(rets),
                    "max_return": max(rets),
                    "created_min": min(made),
                    "created_max": max(made),
                }
            )
        return rows


def _newer(current: Snapshot | None, candidate: Snapshot) -> Snapshot:
    # later created_at wins; ties go to the later insertion
    if current is None or (candidate.created_at, candidate.seq) >= (current.created_at, current.seq):
        return candidate
    return current


def update_rpm(
    store: RpmStore, snapshot_params: ParamVector, train_return: float, created_at: int = 0, **kw
) -> Snapshot:
    return store.update(snapshot_params, train_return, created_at, **kw)


def sample_rpm(store: RpmStore, n_agents: int, rng: np.random.Generator) -> list[Snapshot]:
    """Draw a key uniformly (with replacement), then a snapshot uniformly within it."""
    idx = store.index
    if not idx.keys:
        raise EmptyStore("cannot sample from an empty policy memory")
    out = []
    for _ in range(n_agents):
        snaps = idx.lists[int(rng.integers(len(idx.keys)))]
        out.append(snaps[int(rng.integers(len(snaps)))])
    return out


def sample_hfsp(store: RpmStore, n_agents: int, rng: np.random.Generator) -> list[Snapshot]:
    """Latest snapshot with probability 0.7, otherwise uniform over all of them."""
    idx = store.index
    if not idx.flat:
        raise EmptyStore("cannot sample from an empty policy memory")
    out = []
    for _ in range(n_agents):
        if rng.random() < HFSP_LATEST_PROB:
            out.append(idx.latest)
        else:
            out.append(idx.flat[int(rng.integers(len(idx.flat)))])
    return out


def sample_random(store: RpmStore, n_agents: int, rng: np.random.Generator) -> list[Snapshot]:
    """Uniform over all snapshots, ignoring ranks."""
    idx = store.index
    if not idx.flat:
        raise EmptyStore("cannot sample from an empty policy memory")
    return [idx.flat[int(rng.integers(len(idx.flat)))] for _ in range(n_agents)]


SAMPLERS: dict[str, Callable[[RpmStore, int, np.random.Generator], list[Snapshot]]] = {
    "rpm": sample_rpm,
    "hfsp": sample_hfsp,
    "random": sample_random,
}
