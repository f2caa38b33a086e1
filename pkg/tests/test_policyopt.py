import math

import numpy as np
import pytest

from softbarrier.diffcore import ContractError, NumericError
from softbarrier.envs import QuadraticCost
from softbarrier.nn import AdamState, MlpSpec, ParamSet, Policy, adam_step
from softbarrier.policyopt import combined_policy_update, synthetic_return
from softbarrier.sdegen import GenerativeModel, sde_step

from conftest import assert_grad_close, param_fd


class UnitReward:
    def __call__(self, s, a):
        return np.ones(len(s))

    def var(self, s, a):
        g = s.graph
        return g.add(g.mul(g.sum(s, axis=1), 0.0), 1.0)


COST_2D = QuadraticCost((1.0, 1.0), (0.1,))


def integrator(dt: float = 0.1, noise: float = 0.0) -> GenerativeModel:
    """1-D plant s' = s + dt * a (+ noise); exact zero noise when ``noise`` is 0."""
    m = GenerativeModel.create(1, 1, hidden=(1,), diffusion_hidden=(1,), seed=0, min_std=0.0)
    # drift: a single tanh unit reading only the action, scaled back out
    scale = 1e-3
    p = m.params().map(np.zeros_like).replace(**{
        "drift.W0": np.array([[0.0], [scale]]),
        "drift.W1": np.array([[dt / scale]]),
        "diffusion.b1": np.array([-800.0 if noise == 0 else math.log(math.expm1(noise))]),
    })
    return m.with_params(p)


def linear_policy(k: float, bound: float = 5.0) -> Policy:
    spec = MlpSpec((1, 1))
    return Policy(ParamSet({"W0": np.array([[k]]), "b0": np.zeros(1)}), spec, action_bound=bound)


def test_zero_discount_keeps_only_the_first_reward(small_model, small_policy):
    s0 = np.random.default_rng(0).normal(size=(6, 2))
    est = synthetic_return(small_model, small_policy, s0, 20, 0.0, COST_2D, rng=np.random.default_rng(1))
    expect = COST_2D(s0, small_policy(s0))
    np.testing.assert_allclose(est.per_trajectory, expect, rtol=1e-12)
    assert est.value == pytest.approx(expect.mean(), rel=1e-12)


def test_unit_reward_gives_geometric_sum(small_model, small_policy):
    s0 = np.random.default_rng(2).normal(size=(3, 2))
    est = synthetic_return(small_model, small_policy, s0, 3, 0.9, UnitReward(), rng=np.random.default_rng(3))
    np.testing.assert_allclose(est.per_trajectory, 3.439, rtol=1e-12)
    assert est.value == pytest.approx(3.439, rel=1e-12)
    assert est.value == pytest.approx(np.mean(est.per_trajectory), rel=1e-15)


def test_return_matches_a_hand_rollout(small_model, small_policy):
    rng = np.random.default_rng(4)
    s0, noise = rng.normal(size=(4, 2)), rng.standard_normal((5, 4, 2))
    est = synthetic_return(small_model, small_policy, s0, 5, 0.95, COST_2D, noise=noise)
    s, total = s0, np.zeros(4)
    for t in range(6):
        total += 0.95**t * COST_2D(s, small_policy(s))
        if t < 5:
            s = sde_step(small_model, small_policy, s, noise[t])
    np.testing.assert_allclose(est.per_trajectory, total, rtol=1e-10)


def test_return_gradient_matches_finite_differences(small_model, small_policy):
    rng = np.random.default_rng(5)
    s0, noise = rng.normal(size=(3, 2)), rng.standard_normal((2, 3, 2))
    est = synthetic_return(small_model, small_policy, s0, 2, 0.9, COST_2D, noise=noise, with_grads=True)
    fd = param_fd(lambda p: synthetic_return(small_model, small_policy.with_params(p), s0, 2, 0.9,
                                             COST_2D, noise=noise).value, small_policy.params)
    for k in small_policy.params:
        assert_grad_close(est.grads[k], fd[k], name=k)


def test_bad_arguments_are_contract_errors(small_model, small_policy):
    with pytest.raises(ContractError):
        synthetic_return(small_model, small_policy, np.zeros((1, 2)), 3, 1.5, COST_2D,
                         rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        synthetic_return(small_model, small_policy, np.zeros((1, 2)), 3, 0.9, COST_2D)


def test_blown_up_rollouts_are_excluded(small_model, small_policy):
    rng = np.random.default_rng(6)
    s0, noise = rng.normal(size=(5, 2)), rng.standard_normal((4, 5, 2))
    noise[1, 2] = 1e9
    est = synthetic_return(small_model, small_policy, s0, 4, 0.9, COST_2D, noise=noise)
    assert est.excluded == 1 and len(est.per_trajectory) == 4
    keep = [0, 1, 3, 4]
    clean = synthetic_return(small_model, small_policy, s0[keep], 4, 0.9, COST_2D, noise=noise[:, keep])
    assert est.value == clean.value
    noise[1] = 1e9
    with pytest.raises(NumericError):
        synthetic_return(small_model, small_policy, s0, 4, 0.9, COST_2D, noise=noise)


def _random_grads(params, seed):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(size=v.shape) for k, v in params.items()}


def test_zero_lambda_equals_pure_performance_step(small_policy):
    p = small_policy.params
    gb, gr = _random_grads(p, 1), _random_grads(p, 2)
    a, sa = combined_policy_update(p, gb, gr, AdamState.fresh(p, 1e-3), lam=0.0)
    b, sb = adam_step(p, {k: -v for k, v in gr.items()}, AdamState.fresh(p, 1e-3))
    assert all(a[k].tobytes() == b[k].tobytes() for k in p)
    assert sa == sb


def test_degenerate_components(small_policy):
    p = small_policy.params
    zero = p.zeros_like()
    gb, gr = _random_grads(p, 3), _random_grads(p, 4)
    safety, _ = combined_policy_update(p, gb, dict(zero.items()), AdamState.fresh(p, 1e-3), lam=2.0)
    descent, _ = adam_step(p, {k: 2.0 * v for k, v in gb.items()}, AdamState.fresh(p, 1e-3))
    perf, _ = combined_policy_update(p, dict(zero.items()), gr, AdamState.fresh(p, 1e-3), lam=2.0)
    ascent, _ = adam_step(p, {k: -v for k, v in gr.items()}, AdamState.fresh(p, 1e-3))
    for k in p:
        np.testing.assert_array_equal(safety[k], descent[k])
        np.testing.assert_array_equal(perf[k], ascent[k])
        # first Adam step moves by lr against the sign of the direction
        np.testing.assert_allclose(safety[k] - p[k], -1e-3 * np.sign(gb[k]), rtol=1e-6)


def test_non_finite_component_is_named(small_policy):
    p = small_policy.params
    gb, gr = _random_grads(p, 5), _random_grads(p, 6)
    gr["W0"] = gr["W0"].copy()
    gr["W0"][0, 0] = np.inf
    with pytest.raises(NumericError, match="return gradient for parameter 'W0'"):
        combined_policy_update(p, gb, gr, AdamState.fresh(p, 1e-3))
    with pytest.raises(ContractError):
        combined_policy_update(p, gb, {"W0": gb["W0"]}, AdamState.fresh(p, 1e-3))


def test_performance_ascent_improves_lqr_return_every_step():
    model = integrator()
    policy = linear_policy(0.0)
    s0 = np.linspace(-1.0, 1.0, 8)[:, None]
    noise = np.zeros((30, 8, 1))
    cost = QuadraticCost((1.0,), (0.1,))
    state = AdamState.fresh(policy.params, 5e-3)
    zero = dict(policy.params.zeros_like().items())
    values = []
    for _ in range(25):
        est = synthetic_return(model, policy, s0, 30, 0.99, cost, noise=noise, with_grads=True)
        values.append(est.value)
        params, state = combined_policy_update(policy.params, zero, est.grads, state, lam=0.0)
        policy = policy.with_params(params)
    assert all(b > a for a, b in zip(values, values[1:])), values


def test_return_estimate_is_unbiased():
    model = integrator(noise=0.3)
    policy = linear_policy(-1.0)
    cost = QuadraticCost((1.0,), (0.1,))
    s0 = np.array([0.5])
    T, gamma = 10, 0.95

    # brute force: plain numpy simulation with many paths
    rng = np.random.default_rng(7)
    n = 200_000
    s, total = np.full((n, 1), 0.5), np.zeros(n)
    for t in range(T + 1):
        total += gamma**t * cost(s, policy(s))
        if t < T:
            s = sde_step(model, policy, s, rng.standard_normal((n, 1)))
    truth = total.mean()

    estimates = [synthetic_return(model, policy, np.repeat(s0[None], 10, axis=0), T, gamma, cost,
                                  rng=rng).value for _ in range(400)]
    se = np.std(estimates, ddof=1) / math.sqrt(len(estimates))
    assert abs(np.mean(estimates) - truth) <= 3 * se + 3 * total.std() / math.sqrt(n)
