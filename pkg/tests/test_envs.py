from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softbarrier.diffcore import ContractError
from softbarrier.envs import (CART_MASS, GRAVITY, POLE_HALF_LENGTH, POLE_MASS, Region, Trajectory,
                              contains, discounted_return, empirical_safe_rate, make_env,
                              max_state_gap, minkowski_enlarge, run_episode, run_episodes,
                              sample_initial, step_2d, step_cartpole)

UNSAFE_2D = Region.box([(-1.0, 0.0), (1.2, 1.7)])


def test_unsafe_box_membership():
    assert contains(UNSAFE_2D, np.array([-0.5, 1.5]))
    assert not contains(UNSAFE_2D, np.array([-0.5, 1.0]))
    assert contains(UNSAFE_2D, np.array([0.0, 1.2]))
    np.testing.assert_array_equal(contains(UNSAFE_2D, np.array([[-0.5, 1.5], [2.0, 1.5]])), [True, False])


def test_membership_dimension_mismatch():
    with pytest.raises(ContractError):
        contains(UNSAFE_2D, np.zeros(3))


def test_region_invariants():
    with pytest.raises(ContractError):
        Region.box([(1.0, 0.0)])
    with pytest.raises(ContractError):
        Region.ball(2, (0.0, 0.0), -1.0)
    open_side = Region.box([(None, -0.75), (None, None)])
    assert contains(open_side, np.array([-100.0, 1e9]))
    assert not contains(Region.empty(2), np.zeros(2))


def test_2d_equilibrium_and_euler_arithmetic():
    np.testing.assert_array_equal(step_2d(np.zeros(2), np.zeros(1), np.zeros(2)), np.zeros(2))
    out = step_2d(np.array([1.0, 1.0]), np.zeros(1), np.zeros(2), dt=0.1)
    np.testing.assert_allclose(out, [1.08, 0.97], rtol=1e-12)


def test_2d_increment_variance():
    dt = 0.05
    xi = np.random.default_rng(0).standard_normal((100_000, 2))
    s = np.tile([0.3, -0.2], (len(xi), 1))
    inc = step_2d(s, np.zeros((len(xi), 1)), xi, dt=dt)[:, 1] - s[:, 1]
    assert np.var(inc) == pytest.approx(0.04 * dt, rel=0.05)


def test_cartpole_upright_rest_is_fixed():
    np.testing.assert_array_equal(step_cartpole(np.zeros(4), np.zeros(1), np.zeros(4)), np.zeros(4))


def _linear_cartpole_step(s, force, dt):
    total = CART_MASS + POLE_MASS
    denom = POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS / total)
    theta_acc = (GRAVITY * s[1] - force / total) / denom
    x_acc = force / total - POLE_MASS * POLE_HALF_LENGTH * theta_acc / total
    xd, td = s[2] + dt * x_acc, s[3] + dt * theta_acc
    return np.array([s[0] + dt * xd, s[1] + dt * td, xd, td])


def test_cartpole_small_angle_matches_linearisation():
    s_nl = s_lin = np.array([0.0, 0.01, 0.0, 0.0])
    for _ in range(5):
        s_nl = step_cartpole(s_nl, np.array([0.05]), np.zeros(4))
        s_lin = _linear_cartpole_step(s_lin, 0.05, 0.02)
    np.testing.assert_allclose(s_nl, s_lin, rtol=0.01)


def test_cartpole_initial_samples_stay_in_the_box():
    env = make_env("cartpole")
    s = sample_initial(env, np.random.default_rng(1), 2000)
    assert np.all((s[:, 0] >= -0.167) & (s[:, 0] <= 0.033))
    assert np.all((s[:, 1] >= -0.6) & (s[:, 1] <= -0.5))
    np.testing.assert_array_equal(s[:, 2], -0.35)
    np.testing.assert_array_equal(s[:, 3], 0.53)


def test_2d_initial_samples_lie_in_the_ball():
    env = make_env("2d")
    s = sample_initial(env, np.random.default_rng(2), 5000)
    assert np.all((s[:, 0] + 2.0) ** 2 + s[:, 1] ** 2 <= 0.01 + 1e-15)
    single = sample_initial(env, np.random.default_rng(2))
    assert single.shape == (2,)


def test_regions_are_disjoint_in_both_environments():
    for name in ("2d", "cartpole"):
        env = make_env(name)
        s = sample_initial(env, np.random.default_rng(3), 2000)
        assert not np.any(contains(env.unsafe_region, s))


def test_driving_into_the_unsafe_set_records_the_hit():
    env = make_env("2d")
    start = np.array([[-0.5, 1.45]])
    tr = run_episodes(env, lambda s: np.zeros((len(s), 1)), np.random.default_rng(4), 1, init_states=start)[0]
    assert tr.unsafe_hit == 0
    assert contains(env.unsafe_region, tr.states[tr.unsafe_hit])


def test_episodes_are_deterministic_and_replayable():
    env = make_env("2d")

    def policy(s):
        return -np.clip(s[:, 1:2] + 0.5 * s[:, :1], -3, 3)

    a = run_episode(env, policy, np.random.default_rng(5))
    b = run_episode(env, policy, np.random.default_rng(5))
    assert a.states.tobytes() == b.states.tobytes() and a.rewards.tobytes() == b.rewards.tobytes()
    s = a.states[0]
    for t in range(env.horizon):
        s = env.step(s[None], policy(s[None]), a.noise[t][None])[0]
        assert s.tobytes() == a.states[t + 1].tobytes()
    assert len(a.states) == len(a.actions) == len(a.rewards) == env.horizon + 1


def test_rewards_follow_the_cost():
    env = make_env("2d")
    tr = run_episode(env, lambda s: np.ones((len(s), 1)), np.random.default_rng(6))
    expect = -(tr.states[:, 0] ** 2 + tr.states[:, 1] ** 2 + 0.1 * tr.actions[:, 0] ** 2)
    np.testing.assert_allclose(tr.rewards, expect, rtol=1e-12)
    assert discounted_return(np.ones(4), 0.9) == pytest.approx(3.439)


def test_safe_rate_extremes():
    env = make_env("2d")
    vacuous = replace(env, unsafe_region=Region.empty(2))
    assert empirical_safe_rate(vacuous, lambda s: np.zeros((len(s), 1)), 10, np.random.default_rng(0)) == 1.0
    doomed = replace(env, unsafe_region=Region.box([(None, None), (None, None)]))
    assert empirical_safe_rate(doomed, lambda s: np.zeros((len(s), 1)), 10, np.random.default_rng(0)) == 0.0
    with pytest.raises(ContractError):
        empirical_safe_rate(env, lambda s: np.zeros((len(s), 1)), 0, np.random.default_rng(0))


def test_doubling_episodes_shrinks_the_standard_error():
    # a 50/50 policy: the unsafe set straddles the start, so the noise decides
    env = make_env("2d", horizon=5)
    coin = replace(env, init_region=Region.ball(2, (0.0, 0.0), 1e-9),
                   unsafe_region=Region.box([(None, None), (0.0, None)]))
    zero = lambda s: np.zeros((len(s), 1))  # noqa: E731

    def spread(episodes, reps=60):
        rates = [empirical_safe_rate(coin, zero, episodes, np.random.default_rng(1000 * episodes + r))
                 for r in range(reps)]
        return np.std(rates, ddof=1)

    small, large = spread(200), spread(800)
    # quadrupling the count halves the binomial SE; doubling shrinks it by sqrt(2)
    assert large / small == pytest.approx(0.5, rel=0.25)
    assert spread(400) < small


def test_gap_examples():
    s = np.random.default_rng(7).normal(size=(6, 2))
    np.testing.assert_array_equal(max_state_gap([s], [s.copy()]), [0.0, 0.0])
    t = s.copy()
    t[3] += [0.2, -0.1]
    np.testing.assert_allclose(max_state_gap([s], [t]), [0.2, 0.1], rtol=1e-12)
    u = s.copy()
    u[1] += [-0.05, 0.3]
    both = max_state_gap([s, s], [t, u])
    np.testing.assert_allclose(both, np.maximum(max_state_gap([s], [t]), max_state_gap([s], [u])))
    with pytest.raises(ContractError):
        max_state_gap([s], [s[:-1]])
    with pytest.raises(ContractError):
        max_state_gap([s, s], [s])


def test_minkowski_examples():
    grown = minkowski_enlarge(UNSAFE_2D, np.array([0.1, 0.05]))
    np.testing.assert_allclose(grown.lo, (-1.1, 1.15))
    np.testing.assert_allclose(grown.hi, (0.1, 1.75))
    assert minkowski_enlarge(UNSAFE_2D, np.zeros(2)) == UNSAFE_2D
    ball = Region.ball(3, (0.0, 0.0), 1.0, dims=(0, 2))
    assert minkowski_enlarge(ball, np.array([0.3, 9.0, 0.4])).radius == pytest.approx(1.5)
    with pytest.raises(ContractError):
        minkowski_enlarge(UNSAFE_2D, np.array([0.1, -0.01]))


@settings(max_examples=60, deadline=None)
@given(lo=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       width=st.lists(st.floats(0, 3), min_size=2, max_size=2),
       delta=st.lists(st.floats(0, 1), min_size=2, max_size=2),
       u=st.lists(st.floats(0, 1), min_size=2, max_size=2),
       v=st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_enlarged_box_contains_every_nearby_point(lo, width, delta, u, v):
    lo, width, delta = np.array(lo), np.array(width), np.array(delta)
    box = Region.box(list(zip(lo, lo + width)))
    inner = lo + np.array(u) * width             # a point of the box
    nearby = inner + np.array(v) * delta         # within delta componentwise
    assert contains(box, inner)
    assert contains(minkowski_enlarge(box, delta), nearby)


def test_trajectory_csv_export():
    env = make_env("2d", horizon=3)
    tr = run_episodes(env, lambda s: np.zeros((len(s), 1)), np.random.default_rng(8), 1,
                      init_states=np.array([[-0.5, 1.45]]))[0]
    lines = tr.to_csv(env.unsafe_region).strip().split("\n")
    assert lines[0] == "t,s0,s1,a0,reward,unsafe"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == -0.5 and first[-1] == "1"
    with pytest.raises(ContractError):
        Trajectory(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2), unsafe_hit=5)
