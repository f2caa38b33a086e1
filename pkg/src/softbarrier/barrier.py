"""Soft barrier functions over the learned SDE and their certification.

A barrier ``B: R^n -> (0, 1)`` is trained so that it is small on the initial
set, close to one on the unsafe set, and non-increasing in expectation along
synthetic transitions.  Ville's inequality then bounds the probability of a
synthetic trajectory ever reaching the unsafe set by ``B(s0) / c`` where
``c`` is the barrier level certified on the unsafe samples.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import ContractError, Graph, Var
from .envs import EnvSpec, Region, sample_initial, sample_region
from .nn import AdamState, MlpSpec, ParamSet, Policy, adam_step, init_params, mlp_apply, mlp_forward
from .sdegen import GenerativeModel, rollout_batch, sde_step_var

UNSAFE_LEVEL = 0.95
LIE_TOLERANCE = 1e-3
# The plain mean of E[B(next)] - B(s) telescopes along a rollout and leaves
# interior barrier values unconstrained; training penalises only increases.
TRAIN_LIE_MODE = "hinge"
LIE_MODES = ("mean", "hinge")


@dataclass
class BarrierNet:
    params: ParamSet
    spec: MlpSpec

    def __post_init__(self):
        if self.spec.out_width != 1 or self.spec.output_activation != "sigmoid":
            raise ContractError("barrier network must end in a single sigmoid unit")
        self.params.check_spec(self.spec)

    @classmethod
    def create(cls, state_dim: int, hidden: Sequence[int] = (64, 64), seed: int = 0,
               out_bias: float = -3.0) -> "BarrierNet":
        """Xavier-initialised barrier; ``out_bias`` starts B near sigmoid(out_bias) everywhere."""
        spec = MlpSpec((state_dim, *hidden, 1), output_activation="sigmoid")
        params = init_params(spec, seed)
        last = f"b{len(hidden)}"
        return cls(params.replace(**{last: params[last] + out_bias}), spec)

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return mlp_apply(self.params, self.spec, np.atleast_2d(states))[:, 0]

    def var(self, leaves, states: Var) -> Var:
        return mlp_forward(leaves, self.spec, states)

    def bind(self, graph: Graph, requires_grad: bool = True):
        return self.params.bind(graph, "barrier", requires_grad)

    def with_params(self, params: ParamSet) -> "BarrierNet":
        return BarrierNet(params, self.spec)


@dataclass
class BarrierBatch:
    """Samples feeding one evaluation of the barrier loss."""

    init_states: np.ndarray         # (N, n) from S0
    unsafe_states: np.ndarray       # (N, n) from S_u
    traj_states: np.ndarray         # (N, n) visited by synthetic rollouts
    next_noise: np.ndarray          # (N, M, n) standard normal

    def __post_init__(self):
        for name in ("init_states", "unsafe_states", "traj_states"):
            if len(getattr(self, name)) < 1:
                raise ContractError(f"barrier loss needs at least one sample in {name}")
        if self.next_noise.ndim != 3 or self.next_noise.shape[1] < 1:
            raise ContractError("next_noise must have shape (N, M, n) with M >= 1")
        if self.next_noise.shape[0] != len(self.traj_states):
            raise ContractError("next_noise and traj_states disagree on N")


@dataclass
class BarrierLossValue:
    total: float
    init_term: float
    unsafe_term: float
    lie_term: float
    lie_mean: float
    grads_barrier: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    grads_policy: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def barrier_loss_var(barrier: BarrierNet, bleaves, model: GenerativeModel, mleaves,
                     policy: Policy | None, pleaves, batch: BarrierBatch, g: Graph,
                     lie: str = "mean") -> tuple[Var, Var, Var, Var, float]:
    """Build the three-term loss on ``g``.

    Returns (total, init, unsafe, lie, raw Lie mean).  With ``lie="hinge"``
    the third term averages max(0, E[B(next)] - B(s)) per state instead of
    the signed difference.
    """
    if lie not in LIE_MODES:
        raise ContractError(f"unknown Lie mode {lie!r}")
    init_term = g.mean(barrier.var(bleaves, g.const(batch.init_states)))
    unsafe_term = g.mean(g.sub(1.0, barrier.var(bleaves, g.const(batch.unsafe_states))))
    N, M, n = batch.next_noise.shape
    rep = g.const(np.repeat(batch.traj_states, M, axis=0))
    nxt = sde_step_var(model, mleaves, policy, pleaves, rep, batch.next_noise.reshape(N * M, n))
    b_next = barrier.var(bleaves, nxt)
    b_cur = barrier.var(bleaves, g.const(batch.traj_states))
    if lie == "mean":
        # every state has exactly M successors, so the flat mean is the mean of per-state means
        lie_term = g.sub(g.mean(b_next), g.mean(b_cur))
        raw = float(lie_term.value)
    else:
        per_state = g.sub(g.matmul(g.const(np.repeat(np.eye(N), M, axis=1) / M), b_next), b_cur)
        raw = float(per_state.value.mean())
        lie_term = g.mean(g.mul(per_state, g.const((per_state.value > 0).astype(float))))
    total = g.add(g.add(init_term, unsafe_term), lie_term)
    return total, init_term, unsafe_term, lie_term, raw


def barrier_loss(barrier: BarrierNet, model: GenerativeModel, policy: Policy | None,
                 batch: BarrierBatch, with_grads: bool = True, lie: str = "mean"
                 ) -> BarrierLossValue:
    """Evaluate the loss; gradients cover the barrier and (if present) policy parameters."""
    g = Graph()
    bleaves = barrier.bind(g, with_grads)
    mleaves = model.bind(g, requires_grad=False)
    pleaves = policy.bind(g, with_grads) if policy is not None else None
    total, t1, t2, t3, raw = barrier_loss_var(barrier, bleaves, model, mleaves, policy, pleaves,
                                              batch, g, lie)
    out = BarrierLossValue(float(total.value), float(t1.value), float(t2.value), float(t3.value), raw)
    if with_grads:
        grads = g.backward(total)
        out.grads_barrier = {k: grads[f"barrier.{k}"] for k in barrier.params}
        if policy is not None:
            out.grads_policy = {k: grads[f"policy.{k}"] for k in policy.params}
    return out


def eta_from_barrier(barrier: BarrierNet, init_samples: np.ndarray, mode: str = "max") -> float:
    """Upper bound on unsafe probability read off the initial-set barrier values."""
    vals = barrier(np.asarray(init_samples, dtype=float))
    if vals.size == 0:
        raise ContractError("need at least one initial sample")
    if mode == "max":
        return float(vals.max())
    if mode == "mean":
        return float(vals.mean())
    raise ContractError(f"unknown eta mode {mode!r}")


def _eta_from_values(vals: np.ndarray, mode: str = "max") -> float:
    return float(vals.max() if mode == "max" else vals.mean())


# --------------------------------------------------------------------------- sampling


def sample_traj_states(states: np.ndarray, rng: np.random.Generator, count: int) -> np.ndarray:
    """Pick ``count`` (time, rollout) states from ``states`` of shape (T+1, B, n), t < T."""
    T1, B, _ = states.shape
    t = rng.integers(max(T1 - 1, 1), size=count)
    i = rng.integers(B, size=count)
    return states[t, i]


def make_batch(env: EnvSpec, unsafe: Region, pool: np.ndarray, rng: np.random.Generator,
               n: int, m: int) -> BarrierBatch:
    return BarrierBatch(
        init_states=sample_initial(env, rng, n),
        unsafe_states=sample_region(unsafe, env.state_region, rng, n),
        traj_states=sample_traj_states(pool, rng, n),
        next_noise=rng.standard_normal((n, m, env.state_dim)))


def synthetic_pool(model: GenerativeModel, policy: Policy, env: EnvSpec, rng: np.random.Generator,
                   count: int, horizon: int | None = None) -> np.ndarray:
    """States of ``count`` synthetic rollouts from S0, shape (T+1, kept, n)."""
    T = env.horizon if horizon is None else horizon
    s0 = sample_initial(env, rng, count)
    states, _, trunc = rollout_batch(model, policy, s0, rng.standard_normal((T, count, env.state_dim)))
    return states[:, ~trunc] if np.any(~trunc) else states


def train_barrier(barrier: BarrierNet, state: AdamState, model: GenerativeModel, policy: Policy,
                  env: EnvSpec, unsafe: Region, pool: np.ndarray, rng: np.random.Generator,
                  steps: int, batch_size: int, lie_samples: int, lie: str = TRAIN_LIE_MODE
                  ) -> tuple[BarrierNet, AdamState, BarrierLossValue | None]:
    """Barrier-only descent with the policy and model frozen."""
    last = None
    params = barrier.params
    for _ in range(steps):
        batch = make_batch(env, unsafe, pool, rng, batch_size, lie_samples)
        last = barrier_loss(barrier, model, policy, batch, lie=lie)
        params, state = adam_step(params, last.grads_barrier, state)
        barrier = barrier.with_params(params)
    return barrier, state, last


# --------------------------------------------------------------------------- certification


@dataclass
class SafetyCertificate:
    eta: float
    bound: float
    eta_init: float
    eta_traj: float
    eta_init_mean: float
    unsafe_level: float
    init_mean: float
    init_max: float
    unsafe_min: float
    lie_mean: float
    lie_max: float
    mc_exceed_freq: float
    mc_std_error: float
    mc_samples: int
    valid: bool
    reasons: list[str] = field(default_factory=list)
    delta: list[float] | None = None
    unsafe_region: dict | None = None

    def __post_init__(self):
        if not math.isclose(self.bound, 1.0 - self.eta, rel_tol=0, abs_tol=1e-15):
            raise ContractError("certificate bound must equal 1 - eta")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = "VALID" if self.valid else "INVALID"
        return d


def certify(barrier: BarrierNet, model: GenerativeModel, policy: Policy, env: EnvSpec,
            rng: np.random.Generator, n_init: int = 1000, n_unsafe: int = 1000,
            n_traj: int = 100, n_mc: int = 10_000, n_lie: int = 1000, lie_samples: int = 10,
            horizon: int | None = None, unsafe: Region | None = None,
            level: float = UNSAFE_LEVEL, lie_tol: float = LIE_TOLERANCE) -> SafetyCertificate:
    """Sample-based check of the barrier conditions and the resulting bound.

    ``eta_traj`` is the largest barrier value along ``n_traj`` synthetic
    trajectories, ``eta_init`` the largest value on initial states.  The
    reported ``eta`` is ``eta_traj / level``: requiring ``B >= level`` on the
    unsafe samples, Ville's inequality with threshold ``level`` gives the
    bound.  The Monte Carlo cross-check estimates P(sup_t B >= level) over
    ``n_mc`` fresh rollouts and must not exceed ``eta`` by more than 3
    standard errors.
    """
    unsafe = env.unsafe_region if unsafe is None else unsafe
    T = env.horizon if horizon is None else horizon
    init = sample_initial(env, rng, n_init)
    b_init = barrier(init)
    b_unsafe = barrier(sample_region(unsafe, env.state_region, rng, n_unsafe))

    traj = synthetic_pool(model, policy, env, rng, n_traj, T)
    b_traj = barrier(traj.reshape(-1, env.state_dim)).reshape(traj.shape[:2])
    eta_traj = float(b_traj.max())
    eta_init = float(max(b_init.max(), b_traj[0].max()))

    mc = synthetic_pool(model, policy, env, rng, n_mc, T)
    b_mc = barrier(mc.reshape(-1, env.state_dim)).reshape(mc.shape[:2])
    p = float(np.mean(b_mc.max(axis=0) >= level))
    se = math.sqrt(p * (1.0 - p) / mc.shape[1])

    cur = sample_traj_states(mc, rng, n_lie)
    noise = rng.standard_normal((n_lie, lie_samples, env.state_dim))
    rep = np.repeat(cur, lie_samples, axis=0)
    nxt = model.mean(rep, policy(rep)) + model.std(rep) * noise.reshape(-1, env.state_dim)
    lie = barrier(nxt).reshape(n_lie, lie_samples).mean(axis=1) - barrier(cur)

    eta = min(1.0, eta_traj / level)
    reasons = []
    if b_unsafe.min() < level:
        reasons.append("unsafe-level condition")
    if lie.mean() > lie_tol:
        reasons.append("lie condition")
    if p > eta + 3.0 * se:
        reasons.append("ville cross-check")
    return SafetyCertificate(
        eta=eta, bound=1.0 - eta, eta_init=eta_init, eta_traj=eta_traj,
        eta_init_mean=float(b_init.mean()), unsafe_level=level,
        init_mean=float(b_init.mean()), init_max=float(b_init.max()),
        unsafe_min=float(b_unsafe.min()), lie_mean=float(lie.mean()), lie_max=float(lie.max()),
        mc_exceed_freq=p, mc_std_error=se, mc_samples=int(mc.shape[1]),
        valid=not reasons, reasons=reasons, unsafe_region=unsafe.to_dict())
