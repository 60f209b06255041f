from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rpm_marl.env_core import GameSpec
from rpm_marl.errors import (
    ConfigError,
    EmptyInventory,
    InvalidAction,
    SteppedTerminal,
    UnknownSubstrate,
)
from rpm_marl.substrates import (
    CLEAN,
    DIRECTIONS,
    INTERACT,
    NOOP,
    PAYOFFS,
    RIVER,
    SUBSTRATES,
    SubstrateConfig,
    apple_spawn_probability,
    build_substrate,
    clean_up_dynamics,
    resolve_encounter,
)


def brute_force_payoff(inv_a, inv_b, rows):
    """Expectation over pure-strategy pairs weighted by inventory products."""
    ta, tb = sum(inv_a), sum(inv_b)
    ra = rb = 0.0
    for i, j in itertools.product(range(len(rows)), repeat=2):
        w = (inv_a[i] / ta) * (inv_b[j] / tb)
        ra += w * rows[i][j]
        rb += w * rows[j][i]
    return ra, rb


def inventories(c, max_sum=5):
    for counts in itertools.product(range(max_sum + 1), repeat=c):
        if 0 < sum(counts) <= max_sum:
            yield counts


# --------------------------------------------------------------------- payoffs
def test_matrices_stored_as_printed():
    assert PAYOFFS["chicken"].rows == ((3, 2), (5, 0))
    assert PAYOFFS["stag_hunt"].rows == ((4, 0), (2, 2))
    assert PAYOFFS["prisoners_dilemma"].rows == ((3, 0), (4, 1))
    assert PAYOFFS["pure_coordination"].rows == ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    assert PAYOFFS["rational_coordination"].rows == ((1, 0, 0), (0, 2, 0), (0, 2, 3))
    assert all(v >= 0 for m in PAYOFFS.values() for r in m.rows for v in r)


def test_chicken_hawk_vs_dove():
    r = resolve_encounter(np.array([0, 1]), np.array([1, 0]), PAYOFFS["chicken"])
    assert r == (5.0, 2.0)


def test_stag_hunt_both_stag():
    assert resolve_encounter(np.array([1, 0]), np.array([1, 0]), PAYOFFS["stag_hunt"]) == (4.0, 4.0)


def test_chicken_uniform_mix_averages_cells():
    assert resolve_encounter(np.array([1, 1]), np.array([1, 1]), PAYOFFS["chicken"]) == (2.5, 2.5)


@pytest.mark.parametrize("name", sorted(PAYOFFS))
def test_payoff_matches_brute_force(name):
    m = PAYOFFS[name]
    invs = list(inventories(m.n_strategies))
    for a in invs:
        for b in invs:
            got = resolve_encounter(np.array(a), np.array(b), m)
            want = brute_force_payoff(a, b, m.rows)
            assert abs(got[0] - want[0]) <= 1e-12 and abs(got[1] - want[1]) <= 1e-12


def test_encounter_resets_inventories():
    a, b = np.array([2, 1]), np.array([0, 3])
    resolve_encounter(a, b, PAYOFFS["stag_hunt"])
    assert not a.any() and not b.any()


def test_empty_inventory_is_rejected_without_reset():
    a, b = np.array([0, 0]), np.array([2, 1])
    with pytest.raises(EmptyInventory):
        resolve_encounter(a, b, PAYOFFS["stag_hunt"])
    assert b.tolist() == [2, 1]


# ----------------------------------------------------------------- construction
def test_action_counts():
    assert build_substrate("chicken").spec.action_count == 6
    assert build_substrate("clean_up").spec.action_count == 7
    assert build_substrate("stag_hunt").spec.n_agents == 2
    assert build_substrate("clean_up").spec.n_agents == 3


def test_unknown_substrate():
    with pytest.raises(UnknownSubstrate):
        build_substrate("melting_pot")


def test_bad_config():
    with pytest.raises(ConfigError):
        build_substrate("stag_hunt", {"no_such_key": 1})
    with pytest.raises(ConfigError):
        build_substrate("stag_hunt", {"grid_size": 4})
    with pytest.raises(ConfigError):
        GameSpec(n_agents=1, action_count=6, obs_dim=3, episode_length=10)


def test_invalid_joint_action():
    env = build_substrate("stag_hunt")
    state, _ = env.reset(0)
    with pytest.raises(InvalidAction):
        env.step(state, [0, 6])
    with pytest.raises(InvalidAction):
        env.step(state, [0])
    with pytest.raises(InvalidAction):
        env.step(state, [-1, 0])


# ------------------------------------------------------------------- env_core
@pytest.mark.parametrize("name", SUBSTRATES)
def test_reset_is_seed_deterministic(name):
    env = build_substrate(name)
    s1, o1 = env.reset(7)
    s2, o2 = env.reset(7)
    _, o3 = env.reset(8)
    assert o1.shape == (env.spec.n_agents, env.spec.obs_dim)
    assert np.array_equal(o1, o2)
    assert np.array_equal(s1.positions, s2.positions)
    assert len({tuple(p) for p in s1.positions}) == env.spec.n_agents


def _rollout(env, seed, actions):
    state, obs = env.reset(seed)
    out = [obs]
    rewards = []
    for joint in actions:
        o = env.step(state, joint)
        out.append(o.observations)
        rewards.append(o.rewards)
    return state, np.stack(out), np.stack(rewards)


@pytest.mark.parametrize("name", ["stag_hunt", "clean_up"])
def test_trajectory_is_pure_function_of_seed_and_actions(name):
    env = build_substrate(name, {"episode_length": 60})
    rng = np.random.default_rng(3)
    acts = rng.integers(env.spec.action_count, size=(60, env.spec.n_agents))
    _, o1, r1 = _rollout(env, 11, acts)
    _, o2, r2 = _rollout(env, 11, acts)
    assert np.array_equal(o1, o2) and np.array_equal(r1, r2)


def test_copied_state_steps_identically():
    env = build_substrate("chicken")
    state, _ = env.reset(5)
    for _ in range(10):
        env.step(state, [0, 3])
    twin = state.copy()
    a = env.step(state, [2, INTERACT])
    b = env.step(twin, [2, INTERACT])
    assert np.array_equal(a.observations, b.observations)
    assert np.array_equal(a.rewards, b.rewards)


def test_noop_gives_zero_reward_and_horizon():
    env = build_substrate("stag_hunt", {"episode_length": 25})
    state, _ = env.reset(0)
    for t in range(25):
        out = env.step(state, [NOOP, NOOP])
        assert not out.rewards.any()
        assert out.done == (t == 24)
    with pytest.raises(SteppedTerminal):
        env.step(state, [NOOP, NOOP])


@pytest.mark.parametrize("name", SUBSTRATES)
def test_returns_equal_sum_of_step_rewards(name):
    env = build_substrate(name, {"episode_length": 200})
    rng = np.random.default_rng(1)
    state, _ = env.reset(2)
    total = np.zeros(env.spec.n_agents)
    while not state.done:
        out = env.step(state, rng.integers(env.spec.action_count, size=env.spec.n_agents))
        total += out.rewards
        assert (out.rewards >= 0).all()
    assert np.array_equal(total, state.returns)
    assert state.step_index == env.spec.episode_length


def test_inventories_reset_after_each_encounter():
    env = build_substrate("stag_hunt", {"episode_length": 400})
    rng = np.random.default_rng(9)
    state, _ = env.reset(4)
    seen = 0
    while not state.done:
        before = state.inventories.copy()
        out = env.step(state, rng.integers(6, size=2))
        for i, j, _, _ in out.info["encounters"]:
            seen += 1
            assert not state.inventories[i].any() and not state.inventories[j].any()
        grown = state.inventories - before
        if not out.info["encounters"]:
            assert (grown >= 0).all()
    assert seen > 0


def test_agents_stay_on_distinct_cells():
    env = build_substrate("pure_coordination", {"n_agents": 4, "episode_length": 150})
    rng = np.random.default_rng(0)
    state, _ = env.reset(1)
    while not state.done:
        env.step(state, rng.integers(6, size=4))
        assert len({tuple(p) for p in state.positions}) == 4


# ------------------------------------------------------------ observation locality
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(0, 30), which=st.integers(0, 1000))
def test_cells_outside_window_do_not_change_observation(seed, steps, which):
    env = build_substrate("rational_coordination")
    rng = np.random.default_rng(seed)
    state, _ = env.reset(seed)
    for _ in range(steps):
        env.step(state, rng.integers(6, size=2))
    r = env.layout.radius
    y0, x0 = state.positions[0]
    g = env.config.grid_size
    far = [(y, x) for y in range(g) for x in range(g) if max(abs(y - y0), abs(x - x0)) > r]
    if not far:
        return
    y, x = far[which % len(far)]
    base = env.observe(state)[0]
    for mutate in range(3):
        twin = state.copy()
        if mutate == 0:
            twin.resources[y, x] = (twin.resources[y, x] + 2) % 3
        elif mutate == 1:
            twin.terrain[y, x] = 1 - twin.terrain[y, x] if twin.terrain[y, x] < 2 else 0
        else:
            twin.inventories[1] += 1  # another agent's private state
        assert np.array_equal(env.observe(twin)[0], base)


def test_observation_encodes_inventory_and_orientation():
    env = build_substrate("stag_hunt")
    state, _ = env.reset(0)
    state.inventories[0] = (3, 1)
    state.orientations[0] = 2
    obs = env.observe(state)[0]
    assert np.allclose(env.layout.inventory(obs), [0.75, 0.25])
    assert env.layout.orientation(obs) == 2


# ---------------------------------------------------------------------- clean up
def test_spawn_probability_edges():
    cfg = SubstrateConfig()
    assert apple_spawn_probability(cfg.threshold, cfg) == 0.0
    assert apple_spawn_probability(0.95, cfg) == 0.0
    assert apple_spawn_probability(0.0, cfg) == cfg.beta
    assert apple_spawn_probability(0.3, cfg) == pytest.approx(cfg.beta * 0.5)


def test_cleaning_sequence_clamps_at_zero():
    env = build_substrate("clean_up", {"delta_poll": 0.0})
    state, _ = env.reset(0)
    state.pollution = 0.5
    seen = []
    for _ in range(7):
        clean_up_dynamics(state, env.config, n_cleaning=1)
        seen.append(round(state.pollution, 10))
    assert seen == [0.4, 0.3, 0.2, 0.1, 0.0, 0.0, 0.0]


def test_pollution_rises_without_cleaning_and_blocks_apples():
    env = build_substrate("clean_up", {"episode_length": 100})
    state, _ = env.reset(0)
    orchard = state.orchard
    for _ in range(100):
        env.step(state, [NOOP] * 3)
    assert state.pollution == pytest.approx(1.0)
    # past the threshold nothing regrows
    state.resources[orchard[:, 0], orchard[:, 1]] = -1
    state.done = False
    state.step_index = 0
    for _ in range(30):
        env.step(state, [NOOP] * 3)
    assert (state.resources[orchard[:, 0], orchard[:, 1]] < 0).all()


def test_clean_action_next_to_river_counts():
    env = build_substrate("clean_up")
    state, _ = env.reset(0)
    state.positions[0] = (2, 3)
    assert state.terrain[1, 3] == RIVER
    out = env.step(state, [CLEAN, NOOP, NOOP])
    assert out.info["n_cleaning"] == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bias=st.floats(0.0, 1.0))
def test_pollution_stays_in_unit_interval(seed, bias):
    env = build_substrate("clean_up", {"episode_length": 80})
    rng = np.random.default_rng(seed)
    state, _ = env.reset(seed)
    while not state.done:
        joint = np.where(rng.random(3) < bias, CLEAN, rng.integers(7, size=3))
        out = env.step(state, joint)
        assert 0.0 <= out.info["pollution"] <= 1.0


def test_directions_are_unit_moves():
    assert np.abs(DIRECTIONS).sum(axis=1).tolist() == [1, 1, 1, 1]
