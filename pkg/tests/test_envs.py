import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybriddyn.data import read_dataset, write_dataset
from hybriddyn.errors import DimensionMismatch, DomainError, NonFinite, UnsupportedEnv
from hybriddyn.envs import (ENV_IDS, AffineModel, collect_trajectories, env_step, hanging_init,
                            make_env, nmse, rk4, scripted_expert, swing_up_success, to_obs,
                            vector_field, wall_force, wrap_angle)


def test_ball_free_fall_matches_kinematics():
    spec = make_env("bouncing_ball", noise_std=0.0)
    s = np.array([1.0, 0.0])
    for _ in range(4):  # 4 x 0.05 s
        s = env_step(spec, s, np.zeros(0)).next_state
    assert s[0] == pytest.approx(1.0 - 0.5 * 9.81 * 0.2 ** 2, abs=1e-4)
    assert s[1] == pytest.approx(-9.81 * 0.2, abs=1e-4)


def test_ball_impact_reflects_with_restitution():
    spec = make_env("bouncing_ball", noise_std=0.0, dt=0.5)
    res = env_step(spec, np.array([1.0, 0.0]), np.zeros(0))
    t_hit = np.sqrt(2 / 9.81)
    v_up = 0.8 * 9.81 * t_hit
    rem = 0.5 - t_hit
    assert res.info["impact"]
    np.testing.assert_allclose(res.next_state, [v_up * rem - 0.5 * 9.81 * rem ** 2,
                                                v_up - 9.81 * rem], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ball_height_never_negative(seed):
    spec = make_env("bouncing_ball")
    data = collect_trajectories(spec, "random", 1, 100, rng=seed)
    assert np.all(data[0].x[:, 0] >= 0)


def test_pendulum_energy_is_conserved():
    spec = make_env("pendulum_polar", noise_std=0.0, damping=0.0)
    s = np.array([2.0, 0.3])
    energy = lambda s: 0.5 * s[1] ** 2 + 9.81 * (np.cos(s[0]) - 1.0)
    e0 = energy(s)
    for _ in range(1000):
        s = rk4(lambda y: vector_field(spec, y, 0.0), s, 0.01)
    assert abs(energy(s) - e0) < 1e-5


def test_wall_spring_is_inactive_when_clear():
    spec = make_env("cartpole_wall")
    s = np.array([0.0, 0.05, 0.1, -0.2])
    assert wall_force(spec, s) == 0.0
    M, m, l, g = spec.cart_mass, spec.mass, spec.length, spec.gravity
    # linearized cart-pole around the upright
    mass = np.array([[M + m, m * l], [m * l, m * l * l]])
    ddx, ddth = np.linalg.solve(mass, [1.5, m * g * l * s[1]])
    np.testing.assert_allclose(vector_field(spec, s, 1.5), [s[2], s[3], ddx, ddth], atol=1e-12)
    assert wall_force(spec, np.array([0.1, 0.1, 0, 0])) == pytest.approx(-100.0 * 0.05)


def test_expert_equilibrium_and_pumping():
    spec = make_env("pendulum_polar")
    assert abs(scripted_expert(spec, np.zeros(2))[0]) < 1e-3
    assert abs(scripted_expert(spec, np.array([np.pi, 0.0]))[0]) > 0.1
    assert abs(scripted_expert(spec, np.array([np.pi, 0.5]))[0]) > 0.1
    with pytest.raises(UnsupportedEnv):
        scripted_expert(make_env("bouncing_ball"), np.zeros(2))


def test_expert_swings_up():
    spec = make_env("pendulum_polar", noise_std=0.0)
    data = collect_trajectories(spec, "expert", 100, 1000, hanging_init(spec), rng=0)
    assert sum(swing_up_success(spec, t) for t in data) >= 95


def test_action_is_clipped():
    spec = make_env("pendulum_polar", noise_std=0.0)
    a = env_step(spec, np.array([1.0, 0.0]), [100.0]).next_state
    b = env_step(spec, np.array([1.0, 0.0]), [spec.action_limit]).next_state
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_step_is_seed_deterministic(env_id):
    spec = make_env(env_id, noise_std=0.01)
    s = collect_trajectories(spec, "random", 1, 2, rng=1)[0].x[0]
    u = np.full(spec.action_dim, 0.3)
    a = env_step(spec, s, u, np.random.default_rng(5)).next_state
    b = env_step(spec, s, u, np.random.default_rng(5)).next_state
    np.testing.assert_array_equal(a, b)


def test_dataset_file_is_byte_identical(tmp_path):
    spec = make_env("pendulum_cartesian")
    for name in ("a.jsonl", "b.jsonl"):
        write_dataset(collect_trajectories(spec, "random", 3, 20, rng=9), tmp_path / name)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_dataset(tmp_path / "a.jsonl")
    np.testing.assert_array_equal(back[1].x, collect_trajectories(spec, "random", 3, 20, rng=9)[1].x)


def test_duplicate_initial_states_give_duplicate_rollouts():
    spec = make_env("pendulum_polar", noise_std=0.0)
    init = lambda rng: np.array([3.0, 0.0])
    a, b = collect_trajectories(spec, "expert", 2, 200, init, rng=0)
    np.testing.assert_array_equal(a.x, b.x)


def test_divergence_raises():
    spec = make_env("cartpole_polar", noise_std=0.0)
    with pytest.raises(NonFinite):
        env_step(spec, np.array([0.0, 0.0, 2e6, 0.0]), [0.0])


def test_collect_validates_sizes():
    with pytest.raises(DomainError):
        collect_trajectories(make_env("pendulum_polar"), "random", 0, 10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cartesian_pendulum_on_unit_circle(seed):
    spec = make_env("pendulum_cartesian", noise_std=0.05)
    x = collect_trajectories(spec, "random", 1, 50, rng=seed)[0].x
    np.testing.assert_allclose(x[:, 0] ** 2 + x[:, 1] ** 2, 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_polar_pendulum_angle_is_wrapped(seed):
    spec = make_env("pendulum_polar", noise_std=0.05)
    x = collect_trajectories(spec, "random", 1, 300, rng=seed)[0].x
    assert np.all(np.abs(x[:, 0]) <= np.pi)


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle([3 * np.pi / 2, -3 * np.pi / 2, 0.5]),
                               [-np.pi / 2, np.pi / 2, 0.5])


def test_to_obs_cartpole_cartesian():
    spec = make_env("cartpole_cartesian")
    np.testing.assert_allclose(to_obs(spec, np.array([0.2, 0.0, 1.0, 2.0])), [0.2, 1, 0, 1, 2])


def test_nmse_examples():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(50, 2))
    var = y.var(axis=0)
    assert nmse(y, y, var) == 0.0
    assert nmse(np.tile(y.mean(axis=0), (50, 1)), y, var) == pytest.approx(1.0, rel=1e-12)
    off = y.copy()
    off[:, 1] += 0.3
    assert nmse(off, y, var) == pytest.approx(0.3 ** 2 / var[1] / 2, rel=1e-12)
    with pytest.raises(DimensionMismatch):
        nmse(y[:, :1], y, var)


def test_affine_baseline_recovers_linear_system():
    from hybriddyn.data import Trajectory
    rng = np.random.default_rng(1)
    W = np.array([[0.9, 0.1, 0.5, 0.2], [-0.1, 0.8, 0.0, -0.3]])
    x = np.zeros((40, 2))
    u = rng.normal(size=(40, 1))
    x[0] = rng.normal(size=2)
    for t in range(39):
        x[t + 1] = W @ np.concatenate([x[t], u[t], [1.0]])
    np.testing.assert_allclose(AffineModel.fit([Trajectory(x, u)]).W, W, atol=1e-10)


def test_unknown_env():
    with pytest.raises(UnsupportedEnv):
        make_env("acrobot")
