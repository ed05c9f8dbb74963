import numpy as np
import pytest

from dico.envs import (Dispersion, EnvState, Navigation, Physics, Sampling, env_seeds, make_task,
                       write_trajectory_csv, trajectory_rows, TRAJECTORY_COLUMNS)


def nav_state(pos, goals, vel=None):
    pos = np.asarray(pos, dtype=float)[None]
    return EnvState(pos=pos, vel=np.zeros_like(pos) if vel is None else np.asarray(vel, float)[None],
                    horizon=100, goals=np.asarray(goals, dtype=float)[None])


def random_actions(rng, E, n):
    return rng.uniform(-1.5, 1.5, size=(E, n, 2))


# --- reset -------------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["navigation", "navigation_same_goal", "dispersion", "sampling"])
def test_reset_is_deterministic(name):
    task = make_task(name)
    s1, o1 = task.reset(5, seed=3)
    s2, o2 = task.reset(5, seed=3)
    np.testing.assert_array_equal(o1, o2)
    for k, v in s1.__dict__.items():
        if isinstance(v, np.ndarray):
            np.testing.assert_array_equal(v, getattr(s2, k))
    s3, _ = task.reset(5, seed=4)
    assert not np.array_equal(s1.pos, s3.pos) or name in ("dispersion", "sampling")


def test_navigation_reset_uniform_in_workspace():
    s, o = Navigation(2).reset(200, seed=0)
    assert s.pos.shape == (200, 2, 2) and s.goals.shape == (200, 2, 2)
    assert np.all(np.abs(s.pos) <= 1) and np.all(np.abs(s.goals) <= 1)
    assert o.shape == (200, 2, 4)
    assert abs(s.goals.mean()) < 0.1 and s.goals.std() > 0.5


def test_dispersion_reset():
    s, o = Dispersion(4).reset(3, seed=1)
    np.testing.assert_array_equal(s.pos, 0.0)
    assert not s.eaten.any()
    assert s.food.shape == (3, 4, 2)
    assert o.shape == (3, 4, 12)


def test_sampling_reset():
    task = Sampling(3, grid_size=20)
    s, o = task.reset(2, seed=1)
    assert not s.visited.any()
    np.testing.assert_array_equal(s.pos, 0.0)
    assert np.all((s.grid >= 0) & (s.grid <= 1))
    # total attainable reward is the grid sum; a sweeping path can't exceed it
    total = s.grid_init.sum(axis=(1, 2))
    rng = np.random.default_rng(0)
    got = np.zeros(2)
    while s.t < s.horizon:
        got += task.step(s, random_actions(rng, 2, 3)).rewards[:, 0]
    assert np.all(got <= total + 1e-12)


def test_navigation_needs_two_agents():
    with pytest.raises(ValueError):
        make_task("navigation", 1)
    with pytest.raises(ValueError):
        make_task("tag")


def test_env_seeds_batch_matches_individual():
    task = Dispersion(4)
    seeds = env_seeds(7, 6)
    batch, _ = task.reset(seeds=seeds)
    for e in range(6):
        single, _ = task.reset(seeds=[seeds[e]])
        np.testing.assert_array_equal(single.food[0], batch.food[e])


# --- step ----------------------------------------------------------------------------------

def test_point_mass_update():
    ph = Physics(dt=0.1, drag=0.25)
    task = Navigation(2, ph)
    s = nav_state([[0.0, 0.0], [0.5, 0.5]], [[1.0, 0.0], [0.0, 0.0]], vel=[[0.2, 0.0], [0.0, 0.0]])
    task.step(s, np.array([[[2.0, -0.5], [0.0, 0.0]]]))   # first action clipped to (1, -0.5)
    v = 0.75 * 0.2 + 1.0 * 0.1
    np.testing.assert_allclose(s.vel[0, 0], [v, -0.05])
    np.testing.assert_allclose(s.pos[0, 0], [v * 0.1, -0.005])


def test_positions_stay_in_workspace():
    task = Navigation(2)
    s, _ = task.reset(4, seed=0)
    for _ in range(100):
        task.step(s, np.ones((4, 2, 2)))
    assert np.all(np.abs(s.pos) <= 1.0)


def test_navigation_reward_is_distance_difference():
    task = Navigation(2)
    s = nav_state([[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    # one step of u=1 moves x by 0.01; with u from rest the velocity is u*dt
    r = task.step(s, np.array([[[1.0, 0.0], [1.0, 0.0]]])).rewards
    np.testing.assert_allclose(r[0], [0.01, -0.01])


def test_navigation_reward_example_direct():
    # start at the origin, goal (1, 0), land on (0.1, 0): reward 0.1
    task = Navigation(2, Physics(dt=1.0, drag=1.0))
    s = nav_state([[0.0, 0.0], [0.5, 0.5]], [[1.0, 0.0], [0.5, 0.5]])
    r = task.step(s, np.array([[[0.1, 0.0], [0.0, 0.0]]])).rewards
    assert r[0, 0] == pytest.approx(0.1)


def test_navigation_rewards_telescope():
    task = Navigation(2)
    s, _ = task.reset(3, seed=2)
    start = np.linalg.norm(s.pos - s.goals, axis=-1)
    rng = np.random.default_rng(0)
    total = np.zeros((3, 2))
    done = False
    while not done:
        res = task.step(s, random_actions(rng, 3, 2))
        total += res.rewards
        done = res.done
    np.testing.assert_allclose(total, start - np.linalg.norm(s.pos - s.goals, axis=-1), atol=1e-12)
    with pytest.raises(RuntimeError):
        task.step(s, np.zeros((3, 2, 2)))


def test_same_goal_variant_rewards_goal_zero():
    task = Navigation(2, shared_goal=True)
    s = nav_state([[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    r = task.step(s, np.array([[[1.0, 0.0], [1.0, 0.0]]])).rewards
    np.testing.assert_allclose(r[0], [0.01, 0.01])


def test_navigation_observations():
    task = Navigation(2)
    s = nav_state([[0.2, 0.2], [0.2, 0.2]], [[1.0, 0.0], [-1.0, 0.5]])
    o = task.observe(s)
    np.testing.assert_allclose(o[0, 0], [0.8, -0.2, -1.2, 0.3])
    np.testing.assert_array_equal(o[0, 0], o[0, 1])          # co-located agents see the same thing


def test_step_input_validation():
    task = Navigation(2)
    s, _ = task.reset(2, seed=0)
    with pytest.raises(ValueError):
        task.step(s, np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        task.step(s, np.full((2, 2, 2), np.nan))


def test_dispersion_food_consumed_once_and_flag_persists():
    task = Dispersion(2, n_food=2)
    s, _ = task.reset(1, seed=0)
    s.food[0] = [[0.01, 0.0], [0.9, 0.9]]
    res = task.step(s, np.zeros((1, 2, 2)))                  # both agents touch food 0 at once
    np.testing.assert_array_equal(res.rewards, [[1.0, 1.0]])  # one food, shared, counted once
    assert res.obs[0, 0, 2] == 1.0 and res.obs[0, 1, 2] == 1.0
    res = task.step(s, np.zeros((1, 2, 2)))
    np.testing.assert_array_equal(res.rewards, 0.0)
    assert s.eaten[0, 0] and not s.eaten[0, 1]
    assert res.obs[0, 0, 2] == 1.0 and res.obs[0, 0, 5] == 0.0


def test_dispersion_total_reward_bounded_by_food():
    task = Dispersion(4)
    s, _ = task.reset(8, seed=5)
    rng = np.random.default_rng(1)
    total = np.zeros(8)
    prev = s.eaten.copy()
    while s.t < s.horizon:
        total += task.step(s, random_actions(rng, 8, 4)).rewards[:, 0]
        assert np.all(s.eaten >= prev)
        prev = s.eaten.copy()
    assert np.all(total <= 4)
    np.testing.assert_array_equal(total, s.eaten.sum(axis=1))


def test_sampling_revisit_gives_nothing_and_reward_monotone():
    task = Sampling(3)
    s, _ = task.reset(1, seed=0)
    first = task.step(s, np.zeros((1, 3, 2))).rewards
    center = task.cell_index(np.zeros(2))
    assert first[0, 0] == pytest.approx(s.grid_init[0, center[0], center[1]])
    assert s.grid[0, center[0], center[1]] == 0.0
    again = task.step(s, np.zeros((1, 3, 2))).rewards
    np.testing.assert_array_equal(again, 0.0)
    rng = np.random.default_rng(0)
    cum = [0.0]
    while s.t < s.horizon:
        cum.append(cum[-1] + task.step(s, random_actions(rng, 1, 3)).rewards[0, 0])
    assert np.all(np.diff(cum) >= 0)


def test_sampling_observes_its_neighborhood():
    task = Sampling(3, grid_size=20)
    s, _ = task.reset(1, seed=2)
    s.pos[0, 0] = [0.01, 0.01]        # cell (10, 10)
    s.pos[0, 1] = [-0.999, 0.999]     # corner cell (0, 19): five neighbors off-grid
    o = task.observe(s)[0]
    g = s.grid[0]
    expected = [g[10 + dx, 10 + dy] for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    np.testing.assert_allclose(o[0], [0.01, 0.01, *expected])
    corner = [g[0 + dx, 19 + dy] if 0 <= dx and 19 + dy <= 19 else 0.0
              for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    np.testing.assert_allclose(o[1, 2:], corner)


def test_batched_equals_sequential():
    for task in (Navigation(2), Dispersion(4), Sampling(3)):
        seeds = env_seeds(11, 4)
        batch, _ = task.reset(seeds=seeds)
        singles = [task.reset(seeds=[sd])[0] for sd in seeds]
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = random_actions(rng, 4, task.n_agents)
            rb = task.step(batch, a)
            for e, s in enumerate(singles):
                rs = task.step(s, a[e:e + 1])
                np.testing.assert_array_equal(rs.rewards[0], rb.rewards[e])
                np.testing.assert_array_equal(rs.obs[0], rb.obs[e])


def test_synthesize_matches_observe():
    for task in (Navigation(2), Dispersion(4), Sampling(3)):
        s, o = task.reset(2, seed=1)
        rng = np.random.default_rng(0)
        for _ in range(5):
            o = task.step(s, random_actions(rng, 2, task.n_agents)).obs
        np.testing.assert_allclose(task.synthesize(s, 1, s.pos[1]), o[1])


def test_trajectory_csv(tmp_path):
    task = Navigation(2)
    s, _ = task.reset(2, seed=0)
    a = np.full((2, 2, 2), 0.5)
    res = task.step(s, a)
    rows = trajectory_rows(s, 0, a, res.rewards)
    write_trajectory_csv(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",") == list(TRAJECTORY_COLUMNS)
    assert len(lines) == 1 + 2 * 2
