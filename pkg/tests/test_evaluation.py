from __future__ import annotations

import numpy as np
import pytest

from rpm_marl.errors import ArchMismatch, ConfigError, UnknownScenario
from rpm_marl.evaluation import (
    SCENARIOS,
    ActorSeat,
    BackgroundPolicy,
    EpisodeRecord,
    RandomPolicy,
    ScenarioSpec,
    ScriptedSeat,
    ScriptedStrategy,
    aggregate,
    get_scenario,
    run_evaluation,
    scripted_bot_policy,
    train_background,
)
from rpm_marl.nets import ActorNet
from rpm_marl.substrates import INTERACT, NOOP, build_substrate


def test_mean_of_two_episodes():
    records = [EpisodeRecord(0, 0, [0, 1], [2.0, 9.0]), EpisodeRecord(1, 1, [1, 0], [4.0, 1.0])]
    report = aggregate("x", 1, records)
    assert report.mean_focal_return == 3.0
    assert report.per_agent_returns == [3.0, 5.0]


def test_scenario_validation():
    bg = (BackgroundPolicy(),)
    with pytest.raises(ConfigError):
        ScenarioSpec("bad", "stag_hunt", 0, bg + bg).validate(2)
    with pytest.raises(ConfigError):
        ScenarioSpec("bad", "stag_hunt", 2, ()).validate(2)
    with pytest.raises(ConfigError):
        BackgroundPolicy("snapshot")
    with pytest.raises(UnknownScenario):
        get_scenario("nope")
    for spec in SCENARIOS.values():
        spec.validate(spec.n_agents)


def test_all_scripted_evaluation_is_deterministic():
    a = run_evaluation(ScriptedStrategy("collect", 0), "chicken_eval", episodes=4)
    b = run_evaluation(ScriptedStrategy("collect", 0), "chicken_eval", episodes=4)
    assert a == b
    assert a.recompute_mean() == pytest.approx(a.mean_focal_return, abs=1e-12)


def test_stag_collector_beats_hare_collector():
    stag = run_evaluation(ScriptedStrategy("collect", 0), "stag_hunt_eval", episodes=10)
    hare = run_evaluation(ScriptedStrategy("collect", 1), "stag_hunt_eval", episodes=10)
    assert stag.mean_focal_return > hare.mean_focal_return


def test_report_aggregation_matches_recomputation():
    actor = ActorNet(build_substrate("stag_hunt").spec.obs_dim, 6, seed=3)
    report = run_evaluation(actor, "stag_hunt_eval", episodes=5)
    focal = [ep.seat_returns[0] for ep in report.per_episode]
    assert report.mean_focal_return == pytest.approx(np.mean(focal), abs=1e-12)
    assert report.seeds == [get_scenario("stag_hunt_eval").seed_base + i for i in range(5)]


def test_evaluation_does_not_touch_parameters():
    actor = ActorNet(build_substrate("stag_hunt").spec.obs_dim, 6, seed=4)
    before = actor.params.flat.tobytes()
    run_evaluation(actor, "stag_hunt_eval", episodes=3)
    run_evaluation(actor, "stag_hunt_eval", episodes=3, greedy=True)
    assert actor.params.flat.tobytes() == before


def test_seat_permutation_varies():
    report = run_evaluation(RandomPolicy(), "stag_hunt_eval", episodes=12)
    assert len({tuple(ep.seat_to_agent) for ep in report.per_episode}) == 2


def test_arch_mismatch():
    with pytest.raises(ArchMismatch):
        run_evaluation(ActorNet(5, 6), "stag_hunt_eval", episodes=1)


def test_clean_up_scenario_runs():
    report = run_evaluation(RandomPolicy(), "clean_up_eval", episodes=2)
    assert len(report.per_agent_returns) == 3


# ------------------------------------------------------------------ scripted bot
def _state_with_agent(env, pos, orientation):
    state, _ = env.reset(0)
    state.resources[:] = -1
    state.positions[0] = pos
    state.positions[1] = (1, 1) if tuple(pos) != (1, 1) else (7, 7)
    state.orientations[0] = orientation
    return state


def test_bot_steps_onto_adjacent_target():
    env = build_substrate("stag_hunt")
    for d, (dy, dx) in enumerate([(-1, 0), (1, 0), (0, -1), (0, 1)]):
        state = _state_with_agent(env, (4, 4), d)
        state.resources[4 + dy, 4 + dx] = 0
        obs = env.observe(state)[0]
        assert scripted_bot_policy(ScriptedStrategy("collect", 0), obs, np.random.default_rng(0), env.layout) == d


def test_bot_walks_randomly_when_nothing_visible():
    env = build_substrate("stag_hunt")
    state = _state_with_agent(env, (4, 4), 0)
    obs = env.observe(state)[0]
    strat = ScriptedStrategy("collect", 0)
    a = [scripted_bot_policy(strat, obs, np.random.default_rng(s), env.layout) for s in range(40)]
    b = [scripted_bot_policy(strat, obs, np.random.default_rng(s), env.layout) for s in range(40)]
    assert a == b
    assert set(a) <= {0, 1, 2, 3, NOOP} and len(set(a)) > 1


def test_bot_interacts_when_facing_agent_with_inventory():
    env = build_substrate("stag_hunt")
    state = _state_with_agent(env, (4, 4), 3)
    state.positions[1] = (4, 5)
    state.inventories[0] = (1, 0)
    obs = env.observe(state)[0]
    assert scripted_bot_policy(ScriptedStrategy(), obs, np.random.default_rng(0), env.layout) == INTERACT
    state.inventories[0] = (0, 0)
    obs = env.observe(state)[0]
    assert scripted_bot_policy(ScriptedStrategy(), obs, np.random.default_rng(0), env.layout) != INTERACT


def test_dove_bots_in_chicken_earn_three_each():
    env = build_substrate("chicken", {"episode_length": 400})
    seats = [ScriptedSeat(ScriptedStrategy("collect", 0), env.layout) for _ in range(2)]
    encounters = []
    for seed in range(3):
        for i, seat in enumerate(seats):
            seat.begin(np.random.default_rng([seed, i]))
        state, obs = env.reset(seed)
        while not state.done:
            out = env.step(state, [seats[i].act(obs[i]) for i in range(2)])
            obs = out.observations
            encounters.extend(out.info["encounters"])
    assert encounters
    assert all((ri, rj) == (3.0, 3.0) for _, _, ri, rj in encounters)


def test_clean_bot_cleans_next_to_river():
    env = build_substrate("clean_up")
    state, _ = env.reset(0)
    state.positions[0] = (2, 4)
    obs = env.observe(state)[0]
    from rpm_marl.substrates import CLEAN
    assert scripted_bot_policy(ScriptedStrategy("clean"), obs, np.random.default_rng(0), env.layout) == CLEAN


# ------------------------------------------------------------- background training
def test_train_background_rejects_empty_mask():
    with pytest.raises(ConfigError):
        train_background("stag_hunt", [])
    with pytest.raises(ConfigError):
        train_background("stag_hunt", [5])


def test_full_mask_keeps_substrate_reward(monkeypatch):
    seen = {}

    def fake_training(cfg, **kw):
        seen["cfg"] = cfg
        raise RuntimeError("stop")

    import rpm_marl.orchestrator as orch
    monkeypatch.setattr(orch, "run_training", fake_training)
    with pytest.raises(RuntimeError):
        train_background("stag_hunt", [0, 1])
    assert seen["cfg"]["substrate.pickup_reward"] is None
    with pytest.raises(RuntimeError):
        train_background("stag_hunt", [0])
    assert seen["cfg"]["substrate.pickup_reward"] == [1.0, 0.0]
    assert seen["cfg"].sampler == "off"


@pytest.mark.slow
def test_stag_mask_trains_a_stag_collector():
    snap = train_background("stag_hunt", [0], overrides={"train.max_steps": 100_000, "train.eval_interval": 10**6})
    actor = ActorNet.from_descriptor(snap.descriptor, snap.params)
    env = build_substrate("stag_hunt")
    counts = np.zeros(2)
    rng = np.random.default_rng(0)

    seats = [ActorSeat(actor), ActorSeat(actor)]
    for ep in range(100):
        for seat in seats:
            seat.begin(np.random.default_rng(rng.integers(2**32)))
        state, obs = env.reset(10_000 + ep)
        while not state.done:
            out = env.step(state, [seat.act(o) for seat, o in zip(seats, obs)])
            obs = out.observations
            for _, color in out.info["pickups"]:
                counts[color] += 1
    assert counts[0] > counts[1]
