"""Actor/learner training loop with ranked policy memory.

Each outer step:

1. workers play whole episodes; at every episode start a worker replaces all
   behaviour policies with memory samples with probability ``rpm.p``,
   otherwise every seat runs the current policy;
2. episodes enter the replay buffer;
3. the learner performs one MAPPO update;
4. one measurement episode of the current policy alone gives its mean
   individual return, which files a snapshot into the memory;
5. every ``train.eval_interval`` updates (and at the end) the current policy
   is evaluated on the scenario;
6. the next gather uses the freshly updated policy.

Workers are threads that own their environments and read only frozen
parameters and the memory index captured at the start of the gather. Results
are re-ordered by (worker id, episode counter), so the collected batch does
not depend on thread scheduling.
"""

from __future__ import annotations

import csv
import io
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .autodiff import ParamVector
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, RpmError, WorkerFailure, WorkerTimeout
from .evaluation import EvalReport, get_scenario, run_evaluation
from .mappo import Episode, OptState, ReplayBuffer, TrajectoryBatch, learner_update
from .nets import ActorNet, CriticNet, log_softmax_np, mlp_numpy, sample_categorical
from .rpm_store import SAMPLERS, RpmStore, Snapshot
from .substrates import Substrate, build_substrate

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step",
    "episodes_collected",
    "train_return",
    "eval_mean_focal_return",
    "rpm_key_count",
    "rpm_snapshot_count",
    "policy_loss",
    "critic_loss",
    "entropy",
    "grad_norm",
)


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class MetricsWriter:
    """Append-only CSV with the fixed metrics header."""

    def __init__(self, path: Path | None) -> None:
        self.path = path
        self.rows: list[dict[str, Any]] = []
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def append(self, row: dict[str, Any]) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row.get(k)) for k in METRICS_HEADER])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ConfigError(f"{path} does not carry the metrics header")
        return list(reader)


# ---------------------------------------------------------------- collection
def episode_seed_sequence(seed: int, worker_id: int, counter: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFF, 1, worker_id, counter])


@dataclass(frozen=True)
class StoreView:
    """Read-only handle on one published memory index."""

    index: Any


@dataclass(frozen=True)
class EpisodeJob:
    worker_id: int
    counter: int
    base_seed: int
    live: ParamVector
    memory: StoreView | None
    sampler: str
    p: float


def run_episode(
    env: Substrate,
    actor: ActorNet,
    behaviors: Sequence[ParamVector],
    rng: np.random.Generator,
    env_seed: int,
    greedy: bool = False,
) -> Episode:
    """Play one episode where agent ``i`` acts with ``behaviors[i]``."""
    n = env.spec.n_agents
    t_len = env.spec.episode_length
    d = env.spec.obs_dim
    depth = actor.stack_depth
    state, obs = env.reset(env_seed)
    obs_hist = np.zeros((t_len, n, d), dtype=np.float32)
    actions = np.zeros((t_len, n), dtype=np.int64)
    log_probs = np.zeros((t_len, n), dtype=np.float32)
    rewards = np.zeros((t_len, n), dtype=np.float32)
    frames = np.zeros((depth, n, d), dtype=np.float32)

    groups: dict[int, tuple[ParamVector, list[int]]] = {}
    for i, pv in enumerate(behaviors):
        groups.setdefault(id(pv), (pv, []))[1].append(i)
    group_list = [(pv, np.array(idx)) for pv, idx in groups.values()]

    for t in range(t_len):
        frames[1:] = frames[:-1]
        frames[0] = obs
        obs_hist[t] = obs
        stacked = frames.transpose(1, 0, 2).reshape(n, depth * d)
        logp = np.empty((n, env.spec.action_count), dtype=np.float32)
        for pv, idx in group_list:
            logp[idx] = log_softmax_np(mlp_numpy(pv, stacked[idx]))
        acts = np.argmax(logp, axis=1) if greedy else sample_categorical(logp, rng)
        actions[t] = acts
        log_probs[t] = logp[np.arange(n), acts]
        out = env.step(state, acts)
        rewards[t] = out.rewards
        obs = out.observations
    return Episode(obs_hist, actions, log_probs, rewards, tuple(pv.tag for pv in behaviors), seed=env_seed)


@dataclass
class BehaviorChoice:
    rng: np.random.Generator
    env_seed: int
    behaviors: list[ParamVector]
    keys: tuple[int | None, ...]
    from_memory: bool


def choose_behavior(job: EpisodeJob, n_agents: int) -> BehaviorChoice:
    """Decide at episode start whether memory snapshots replace every seat."""
    ss = episode_seed_sequence(job.base_seed, job.worker_id, job.counter)
    env_seed = int(ss.generate_state(1, np.uint64)[0])
    rng = np.random.default_rng(ss)
    use_memory = rng.random() < job.p
    if use_memory and job.sampler != "off" and job.memory is not None and job.memory.index.flat:
        snaps = SAMPLERS[job.sampler](job.memory, n_agents, rng)
        return BehaviorChoice(rng, env_seed, [s.params for s in snaps], tuple(s.key for s in snaps), True)
    return BehaviorChoice(rng, env_seed, [job.live] * n_agents, (None,) * n_agents, False)


def collect_episode(env: Substrate, actor: ActorNet, job: EpisodeJob) -> Episode:
    choice = choose_behavior(job, env.spec.n_agents)
    ep = run_episode(env, actor, choice.behaviors, choice.rng, choice.env_seed)
    ep.worker_id = job.worker_id
    ep.counter = job.counter
    ep.from_memory = choice.from_memory
    ep.snapshot_keys = choice.keys
    return ep


class WorkerPool:
    """W threads, each owning one environment, feeding a bounded result queue."""

    def __init__(
        self,
        make_env: Callable[[], Substrate],
        actor_template: ActorNet,
        n_workers: int,
        queue_size: int = 8,
        timeout: float = 600.0,
    ) -> None:
        if n_workers < 1:
            raise ConfigError("need at least one worker")
        self.n_workers = n_workers
        self.timeout = timeout
        self._inboxes: list[queue.Queue] = [queue.Queue() for _ in range(n_workers)]
        self._results: queue.Queue = queue.Queue(maxsize=max(1, queue_size))
        self._threads = []
        for w in range(n_workers):
            t = threading.Thread(
                target=self._loop,
                args=(w, make_env(), actor_template),
                name=f"rpm-worker-{w}",
                daemon=True,
            )
            t.start()
            self._threads.append(t)

    def _loop(self, worker_id: int, env: Substrate, actor: ActorNet) -> None:
        inbox = self._inboxes[worker_id]
        while True:
            job = inbox.get()
            if job is None:
                return
            try:
                result: Any = collect_episode(env, actor, job)
            except BaseException as exc:  # forwarded to the learner thread
                result = exc
            self._results.put((job.worker_id, job.counter, result))

    def run(self, jobs: Sequence[EpisodeJob]) -> list[Episode]:
        for job in jobs:
            self._inboxes[job.worker_id].put(job)
        done: dict[tuple[int, int], Episode] = {}
        failure: BaseException | None = None
        for _ in jobs:
            try:
                wid, counter, result = self._results.get(timeout=self.timeout)
            except queue.Empty:
                raise WorkerTimeout(f"no episode arrived within {self.timeout}s") from None
            if isinstance(result, BaseException):
                failure = failure or result
                continue
            done[(wid, counter)] = result
        if failure is not None:
            raise WorkerFailure(f"worker crashed: {failure!r}") from failure
        return [done[k] for k in sorted(done)]

    def close(self) -> None:
        for inbox in self._inboxes:
            inbox.put(None)
        for t in self._threads:
            t.join(timeout=5)


def gather_trajectories(pool: WorkerPool, jobs: Sequence[EpisodeJob]) -> TrajectoryBatch:
    return TrajectoryBatch(pool.run(jobs))


# ------------------------------------------------------------------ training
@dataclass
class TrainResult:
    final_snapshot: Snapshot
    actor: ActorNet
    critic: CriticNet
    store: RpmStore | None
    metrics: list[dict[str, Any]]
    last_eval: EvalReport | None
    run_dir: Path | None
    env_steps: int
    episodes: int
    trace: list[tuple[int, str]] = field(default_factory=list)
    memory_episode_flags: list[bool] = field(default_factory=list)
    buffer: ReplayBuffer | None = None


def snapshot_checkpoint(snap: Snapshot, extra: dict[str, Any] | None = None) -> Checkpoint:
    meta = {
        "train_return": snap.train_return,
        "key": snap.key,
        "created_at": snap.created_at,
        "arch_digest": snap.arch_digest,
    }
    meta.update(extra or {})
    return Checkpoint(snap.descriptor or {}, snap.params, meta)


def measure_return(env: Substrate, actor: ActorNet, seed: int) -> float:
    """Mean individual return of one episode with every seat on the current policy."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, 2])
    rng = np.random.default_rng(ss)
    env_seed = int(ss.generate_state(1, np.uint64)[0])
    frozen = actor.params.freeze()
    ep = run_episode(env, actor, [frozen] * env.spec.n_agents, rng, env_seed)
    return float(ep.returns.mean())


def run_training(
    config: RunConfig,
    run_dir: str | Path | None = None,
    store: RpmStore | None = None,
    progress: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """Train the shared policy according to ``config``; see the module docstring."""
    v = config.values
    run_dir = Path(run_dir) if run_dir is not None else (Path(v["train.run_dir"]) if v["train.run_dir"] else None)
    seed = int(v["train.seed"])
    env_cfg = config.substrate_config()
    name = config.substrate_name
    make_env = lambda: build_substrate(name, env_cfg)  # noqa: E731
    env = make_env()
    spec = env.spec
    ppo = config.ppo()
    optim = config.optimizer()
    scenario = get_scenario(config.scenario_name)
    if scenario.substrate != name:
        raise ConfigError(f"scenario {scenario.name} runs on {scenario.substrate}, not {name}")
    eval_env_cfg = {k: getattr(env_cfg, k) for k in ("grid_size", "episode_length", "resources_per_color", "respawn_delay")}

    actor = ActorNet(spec.obs_dim, spec.action_count, v["model.stack_depth"], v["model.hidden"], seed=seed)
    critic = CriticNet(spec.obs_dim, spec.action_count, spec.n_agents, v["model.hidden"], seed=seed + 1)
    opt = OptState.create(actor, critic)
    buffer = ReplayBuffer(ppo.buffer_capacity)
    learner_rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0]))
    sampler = config.sampler
    if sampler != "off" and store is None:
        store = RpmStore(
            config.psi,
            actor.arch_digest,
            literal=v["rpm.literal_key"],
            snapshot_budget=v["rpm.snapshot_budget"],
            spill_dir=(run_dir / "rpm_spill") if run_dir is not None else None,
        )
    if sampler == "off":
        store = None

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(config.to_yaml())
    writer = MetricsWriter(run_dir / "metrics.csv" if run_dir is not None else None)
    trace: list[tuple[int, str]] = []
    debug = bool(v["train.debug_trace"])
    memory_flags: list[bool] = []

    def mark(step: int, phase: str) -> None:
        if debug:
            trace.append((step, phase))

    pool = WorkerPool(make_env, actor, v["train.n_workers"], v["train.queue_size"], v["train.worker_timeout"])
    counters = [0] * v["train.n_workers"]
    env_steps = episodes = 0
    outer = 0
    last_eval: EvalReport | None = None
    last_return: float | None = None
    max_steps = v["train.max_steps"]
    per_update = v["train.episodes_per_update"]
    try:
        while env_steps < max_steps:
            live = actor.params.freeze()
            memory = StoreView(store.index) if store is not None else None
            mark(outer, "sample_behavior")
            jobs = []
            for j in range(per_update):
                w = j % pool.n_workers
                jobs.append(EpisodeJob(w, counters[w], seed, live, memory, sampler, v["rpm.p"]))
                counters[w] += 1
            batch = gather_trajectories(pool, jobs)
            buffer.extend(batch.episodes)
            memory_flags.extend(e.from_memory for e in batch.episodes)
            episodes += len(batch)
            env_steps += len(batch) * spec.episode_length
            mark(outer, "gather")
            outer += 1
            if len(buffer) < ppo.batch_size:
                continue

            metrics = learner_update(buffer, actor, critic, opt, ppo, optim, learner_rng)
            mark(outer - 1, "train")
            last_return = measure_return(env, actor, seed * 1_000_003 + opt.updates)
            if store is not None:
                store.update(actor.params, last_return, env_steps, actor.arch_digest, actor.descriptor)
                mark(outer - 1, "update_rpm")
            eval_value = None
            if opt.updates % v["train.eval_interval"] == 0 or env_steps >= max_steps:
                last_eval = run_evaluation(
                    actor.with_params(actor.params.freeze()),
                    scenario,
                    greedy=v["eval.greedy"],
                    episodes=v["eval.episodes_per_eval"],
                    substrate_config=eval_env_cfg,
                )
                eval_value = last_eval.mean_focal_return
                mark(outer - 1, "evaluate")
            mark(outer - 1, "sync_behavior")
            row = {
                "step": env_steps,
                "episodes_collected": episodes,
                "train_return": last_return,
                "eval_mean_focal_return": eval_value,
                "rpm_key_count": store.key_count if store is not None else 0,
                "rpm_snapshot_count": store.total if store is not None else 0,
                "policy_loss": metrics["policy_loss"],
                "critic_loss": metrics["critic_loss"],
                "entropy": metrics["entropy"],
                "grad_norm": metrics["grad_norm"],
            }
            writer.append(row)
            if progress is not None:
                progress(row)
    finally:
        pool.close()
        writer.close()

    if last_eval is None:
        last_eval = run_evaluation(
            actor.with_params(actor.params.freeze()), scenario, greedy=v["eval.greedy"],
            episodes=v["eval.episodes_per_eval"], substrate_config=eval_env_cfg,
        )
    if last_return is None:
        last_return = measure_return(env, actor, seed * 1_000_003)
    final = Snapshot(
        actor.params.freeze(), actor.arch_digest, last_return,
        store.key_for(last_return) if store is not None else 0, env_steps, -1, actor.descriptor,
    )
    if run_dir is not None:
        save_checkpoint(
            run_dir / "final.ckpt",
            snapshot_checkpoint(final, {"substrate": name, "env_steps": env_steps,
                                        "eval_mean_focal_return": last_eval.mean_focal_return}),
        )
        write_rpm_index(run_dir / "rpm_index.csv", store)
        if debug:
            (run_dir / "trace.log").write_text("".join(f"{s}\t{p}\n" for s, p in trace))
    return TrainResult(final, actor, critic, store, writer.rows, last_eval, run_dir,
                       env_steps, episodes, trace, memory_flags, buffer)


RPM_INDEX_HEADER = ("seq", "key", "train_return", "created_at")
RPM_SUMMARY_HEADER = ("key", "count", "min_return", "max_return", "created_min", "created_max")


def write_rpm_index(path: Path, store: RpmStore | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RPM_INDEX_HEADER)
        if store is None:
            return
        for s in store.index.flat:
            w.writerow([s.seq, s.key, repr(s.train_return), s.created_at])


def summarize_rpm_index(path: str | Path) -> str:
    """Aggregate a run's snapshot index into one CSV row per key."""
    groups: dict[int, list[tuple[float, int]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(int(row["key"]), []).append((float(row["train_return"]), int(row["created_at"])))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RPM_SUMMARY_HEADER)
    for key in sorted(groups):
        rets = [r for r, _ in groups[key]]
        made = [c for _, c in groups[key]]
        w.writerow([key, len(rets), repr(min(rets)), repr(max(rets)), min(made), max(made)])
    return out.getvalue()
