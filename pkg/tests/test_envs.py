import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflownets.envs import (
    CycleError,
    DiscreteDag,
    EnvSpec,
    PointRobotConfig,
    PointRobotEnv,
    closed_form_parent,
    dag_enumerate_trajectories,
    make_env,
    terminal_reward,
)


def test_reset_default_start():
    env = PointRobotEnv()
    np.testing.assert_array_equal(env.reset(), [0.0, 0.0])
    np.testing.assert_array_equal(env.reset(), env.reset())


def test_reset_one_goal():
    env = make_env("point-robot-onegoal-sparse")
    np.testing.assert_array_equal(env.reset(), [0.0, 0.0])
    assert env.config.goals == ((5.0, 10.0),)


def test_unit_steps():
    env = PointRobotEnv()
    env.reset()
    s, r, done = env.step(0.0)
    np.testing.assert_allclose(s, [1.0, 0.0])
    assert r == 0.0 and not done
    env.reset()
    s, r, done = env.step(math.pi / 2)
    np.testing.assert_allclose(s, [0.0, 1.0], atol=1e-15)
    assert r == 0.0 and not done


def test_last_step_on_goal_pays_one():
    env = make_env("point-robot-onegoal-sparse")
    env.reset()
    for _ in range(11):
        env.step(math.pi / 2)
    # 11 unit steps up, then place the robot one unit left of the goal
    env.state = np.array([4.0, 10.0])
    s, r, done = env.step(0.0)
    np.testing.assert_allclose(s, [5.0, 10.0])
    assert done and r == pytest.approx(1.0)


def test_episode_ends_after_twelve_steps():
    env = PointRobotEnv()
    env.reset()
    dones = [env.step(0.3)[2] for _ in range(12)]
    assert dones == [False] * 11 + [True]


def test_reward_values():
    cfg = PointRobotConfig()
    assert terminal_reward((5.0, 10.0), cfg) == 1.0
    assert terminal_reward((10.0, 5.0), cfg) == 1.0
    assert terminal_reward((7.5, 7.5), cfg) == pytest.approx(math.exp(-12.5 / 8.0))
    assert terminal_reward((7.5, 7.5), cfg) == pytest.approx(0.2096, abs=5e-5)
    assert terminal_reward((1e3, -1e3), cfg) < 1e-300


def test_reward_vectorised_matches_scalar(rng):
    cfg = PointRobotConfig()
    pts = rng.uniform(0, 12, size=(20, 2))
    np.testing.assert_allclose(terminal_reward(pts, cfg), [terminal_reward(p, cfg) for p in pts])


def test_out_of_range_action_is_clamped():
    env = PointRobotEnv()
    env.reset()
    s, _, _ = env.step(3.0)
    np.testing.assert_allclose(s, [0.0, 1.0], atol=1e-15)
    s, _, _ = env.step(-1.0)
    np.testing.assert_allclose(s, [1.0, 1.0], atol=1e-15)
    assert env.clamped_actions == 2


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-20, 20), y=st.floats(-20, 20), theta=st.floats(0, math.pi / 2),
)
def test_translation_and_closed_form_parent(x, y, theta):
    env = PointRobotEnv()
    env.reset()
    env.state = np.array([x, y])
    s_next, _, _ = env.step(theta)
    np.testing.assert_allclose(s_next - [x, y], [math.cos(theta), math.sin(theta)], atol=1e-12)
    np.testing.assert_allclose(closed_form_parent(s_next, [theta]), [x, y], atol=1e-12)


def test_step_batch_matches_step(rng):
    env = PointRobotEnv()
    states = rng.uniform(0, 5, size=(6, 2))
    thetas = rng.uniform(0, math.pi / 2, size=6)
    nxt, rewards, done = env.step_batch(states, thetas, 11)
    assert done
    for i in range(6):
        env.reset()
        env.state, env.step_index = states[i].copy(), 11
        s, r, _ = env.step(thetas[i])
        np.testing.assert_allclose(nxt[i], s)
        assert rewards[i] == pytest.approx(r)


def test_spec_constants():
    spec = PointRobotEnv().spec
    assert spec.mu_A == pytest.approx(math.pi / 2)
    assert spec.diam_A == pytest.approx(math.pi / 2)
    assert spec.diam_S == pytest.approx(12 * math.sqrt(2))
    assert spec.max_episode_len == 12


def test_spec_box_measure():
    spec = EnvSpec.box(3, [0.0, -1.0], [2.0, 1.0], 1.0, 5)
    assert spec.mu_A == pytest.approx(4.0)
    assert spec.diam_A == pytest.approx(math.sqrt(8.0))


def test_sample_actions_in_box(rng):
    a = PointRobotEnv().spec.sample_actions(rng, 1000)
    assert a.shape == (1000, 1)
    assert a.min() >= 0.0 and a.max() <= math.pi / 2


def test_bad_configs():
    with pytest.raises(ValueError):
        PointRobotConfig(goals=())
    with pytest.raises(ValueError):
        PointRobotConfig(episode_len=0)
    with pytest.raises(KeyError):
        make_env("no-such-env")


# -- discrete DAG


def test_chain_has_one_path():
    dag = DiscreteDag(3, [(0, 1, 1.0), (1, 2, 1.0)])
    assert dag_enumerate_trajectories(dag) == [[0, 1, 2]]


def test_diamond_has_two_paths():
    dag = DiscreteDag(4, [(0, 1, 2.0), (0, 2, 3.0), (1, 3, 2.0), (2, 3, 3.0)])
    assert sorted(dag_enumerate_trajectories(dag)) == [[0, 1, 3], [0, 2, 3]]


def _matrix_power_count(adj, source, sink):
    n = len(adj)
    total, power = 0, np.eye(n, dtype=np.int64)
    for _ in range(n):
        power = power @ adj
        total += power[source, sink]
    return int(total)


@pytest.mark.parametrize("seed", range(10))
def test_path_count_matches_matrix_powers(seed):
    rng = np.random.default_rng(seed)
    n = 5
    edges = [(u, v, 1.0) for u in range(n - 1) for v in range(u + 1, n)
             if rng.random() < 0.6 and not (u == 0 and v == 0)]
    dag = DiscreteDag(n, edges)
    paths = dag_enumerate_trajectories(dag)
    assert len(paths) == _matrix_power_count(dag.adjacency(), 0, n - 1)
    assert len({tuple(p) for p in paths}) == len(paths)


def test_cycle_is_rejected():
    dag = DiscreteDag(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 3, 1.0)])
    with pytest.raises(CycleError):
        dag_enumerate_trajectories(dag)


@pytest.mark.parametrize("edges", [
    [(0, 1, 1.0), (0, 1, 2.0)],
    [(0, 5, 1.0)],
    [(0, 1, -1.0)],
    [(1, 0, 1.0)],
    [(0, 2, 1.0), (2, 1, 1.0)],
])
def test_dag_validation(edges):
    with pytest.raises(ValueError):
        DiscreteDag(3, edges)
