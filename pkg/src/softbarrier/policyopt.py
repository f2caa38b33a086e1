"""Pathwise policy optimisation through the learned SDE."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import ContractError, Graph, NumericError, Var
from .nn import AdamState, ParamSet, Policy, adam_step
from .sdegen import GenerativeModel, rollout_batch, sde_step_var

log = logging.getLogger(__name__)


@dataclass
class ReturnEstimate:
    value: float
    per_trajectory: list[float]
    horizon: int
    gamma: float
    excluded: int = 0
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def synthetic_return(model: GenerativeModel, policy: Policy, init_states: np.ndarray, horizon: int,
                     gamma: float, reward_fn, noise: np.ndarray | None = None,
                     rng: np.random.Generator | None = None, with_grads: bool = False
                     ) -> ReturnEstimate:
    """Mean discounted return of synthetic rollouts, optionally with d/dtheta.

    ``reward_fn`` must provide ``var(s, a)`` returning per-row rewards on the
    tape.  Noise is either given (shape (T, N, n)) or drawn from ``rng``;
    rollouts that blow up are dropped from the mean and counted in
    ``excluded``.
    """
    init_states = np.atleast_2d(np.asarray(init_states, dtype=float))
    if len(init_states) < 1:
        raise ContractError("need at least one initial state")
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must lie in [0, 1]")
    n = model.state_dim
    if noise is None:
        if rng is None:
            raise ContractError("either noise or rng is required")
        noise = rng.standard_normal((horizon, len(init_states), n))
    _, _, trunc = rollout_batch(model, policy, init_states, noise)
    keep = ~trunc
    excluded = int(trunc.sum())
    if excluded:
        log.warning("excluding %d blown-up synthetic rollouts from the return", excluded)
    if not keep.any():
        raise NumericError("every synthetic rollout blew up")
    s0, noise = init_states[keep], noise[:, keep]

    g = Graph()
    mleaves = model.bind(g, requires_grad=False)
    pleaves = policy.bind(g, with_grads)
    s: Var = g.const(s0)
    per: Var | None = None
    for t in range(horizon + 1):
        a = policy.forward(pleaves, s)
        r = g.mul(reward_fn.var(s, a), gamma**t)
        per = r if per is None else g.add(per, r)
        if t < horizon:
            if gamma == 0.0:
                break
            s = sde_step_var(model, mleaves, policy, pleaves, s, noise[t])
    total = g.mean(per)
    est = ReturnEstimate(float(total.value), [float(v) for v in per.value], horizon, gamma, excluded)
    if with_grads:
        grads = g.backward(total)
        est.grads = {k: grads[f"policy.{k}"] for k in policy.params}
    return est


def combined_policy_update(params: ParamSet, barrier_grad, return_grad, state: AdamState,
                           lam: float = 1.0) -> tuple[ParamSet, AdamState]:
    """One Adam step descending ``lam * L_B`` while ascending the return."""
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    for name, grads in (("barrier", barrier_grad), ("return", return_grad)):
        for k in params:
            if k not in grads or np.shape(grads[k]) != params[k].shape:
                raise ContractError(f"{name} gradient for {k!r} missing or misshapen")
            if not np.all(np.isfinite(grads[k])):
                raise NumericError(f"non-finite {name} gradient for parameter {k!r}")
    direction = {k: lam * np.asarray(barrier_grad[k]) - np.asarray(return_grad[k]) for k in params}
    return adam_step(params, direction, state)
