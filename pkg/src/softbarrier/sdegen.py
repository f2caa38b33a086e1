"""Neural discrete-time SDE surrogate of the plant.

    s_hat(t+1) = G(s, pi(s)) + Sigma(s) * w,    w ~ N(0, I)

with ``G(s, a) = s + f(s, a)`` for an MLP ``f`` and ``Sigma`` a softplus MLP
giving per-coordinate standard deviations.  The model is fitted by
teacher-forced Gaussian maximum likelihood on observed transitions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffcore import ContractError, Graph, NumericError, Var
from .nn import AdamState, MlpSpec, ParamSet, Policy, adam_step, init_params, mlp_apply, mlp_forward

log = logging.getLogger(__name__)

BLOWUP = 1e6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GenerativeModel:
    drift_spec: MlpSpec
    drift_params: ParamSet
    diffusion_spec: MlpSpec
    diffusion_params: ParamSet
    state_dim: int
    action_dim: int
    min_std: float = 1e-4

    def __post_init__(self):
        n, m = self.state_dim, self.action_dim
        if self.drift_spec.in_width != n + m or self.drift_spec.out_width != n:
            raise ContractError("drift network must map n+m -> n")
        if self.diffusion_spec.in_width != n or self.diffusion_spec.out_width != n:
            raise ContractError("diffusion network must map n -> n")
        if self.diffusion_spec.output_activation != "softplus":
            raise ContractError("diffusion network needs a softplus output")
        self.drift_params.check_spec(self.drift_spec)
        self.diffusion_params.check_spec(self.diffusion_spec)

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden: Sequence[int] = (64, 64),
               diffusion_hidden: Sequence[int] | None = None, seed: int = 0,
               min_std: float = 1e-4) -> "GenerativeModel":
        diffusion_hidden = hidden if diffusion_hidden is None else diffusion_hidden
        dspec = MlpSpec((state_dim + action_dim, *hidden, state_dim))
        sspec = MlpSpec((state_dim, *diffusion_hidden, state_dim), output_activation="softplus")
        dparams = init_params(dspec, seed)
        sparams = init_params(sspec, seed + 1)
        # start the residual drift near identity and the noise small
        last = dspec.n_layers - 1
        dparams = dparams.replace(**{f"W{last}": dparams[f"W{last}"] * 0.1})
        slast = sspec.n_layers - 1
        sparams = sparams.replace(**{f"b{slast}": np.full(state_dim, -3.0)})
        return cls(dspec, dparams, sspec, sparams, state_dim, action_dim, min_std)

    # -- parameter plumbing ----------------------------------------------------

    def params(self) -> ParamSet:
        arrays = {f"drift.{k}": v for k, v in self.drift_params.items()}
        arrays.update({f"diffusion.{k}": v for k, v in self.diffusion_params.items()})
        return ParamSet(arrays)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "GenerativeModel":
        drift = ParamSet({k[6:]: v for k, v in params.items() if k.startswith("drift.")})
        diff = ParamSet({k[10:]: v for k, v in params.items() if k.startswith("diffusion.")})
        return GenerativeModel(self.drift_spec, drift, self.diffusion_spec, diff,
                               self.state_dim, self.action_dim, self.min_std)

    def bind(self, graph: Graph, requires_grad: bool = True) -> dict[str, dict[str, Var]]:
        return {"drift": self.drift_params.bind(graph, "drift", requires_grad),
                "diffusion": self.diffusion_params.bind(graph, "diffusion", requires_grad)}

    # -- numeric evaluation ----------------------------------------------------

    def mean(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return s + mlp_apply(self.drift_params, self.drift_spec, np.concatenate([s, a], axis=1))

    def std(self, s: np.ndarray) -> np.ndarray:
        return mlp_apply(self.diffusion_params, self.diffusion_spec, s) + self.min_std

    # -- differentiable evaluation ----------------------------------------------

    def mean_var(self, leaves, s: Var, a: Var | np.ndarray) -> Var:
        g = s.graph
        x = g.concat([s, a], axis=1)
        return g.add(s, mlp_forward(leaves["drift"], self.drift_spec, x))

    def std_var(self, leaves, s: Var) -> Var:
        g = s.graph
        out = mlp_forward(leaves["diffusion"], self.diffusion_spec, s)
        return g.add(out, self.min_std) if self.min_std else out


def _actions(policy: Policy | None, s: np.ndarray) -> np.ndarray:
    if policy is None:
        return np.zeros((s.shape[0], 0))
    return policy(s)


def sde_step(model: GenerativeModel, policy: Policy | None, s: np.ndarray, w: np.ndarray
             ) -> np.ndarray:
    """One transition for a state (1-D) or batch of states (2-D) with given noise."""
    s = np.asarray(s, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    single = s.ndim == 1
    sb, wb = (s[None], w[None]) if single else (s, w)
    if not (np.all(np.isfinite(sb)) and np.all(np.isfinite(wb))):
        raise NumericError("sde_step: non-finite state or noise")
    out = model.mean(sb, _actions(policy, sb)) + model.std(sb) * wb
    if not np.all(np.isfinite(out)):
        raise NumericError("sde_step: non-finite next state")
    return out[0] if single else out


def sde_step_var(model: GenerativeModel, mleaves, policy: Policy | None, pleaves,
                 s: Var, w: np.ndarray) -> Var:
    """Reparameterised transition: differentiable in model and policy leaves, noise fixed."""
    g = s.graph
    a = policy.forward(pleaves, s) if policy is not None else np.zeros((s.shape[0], 0))
    mu = model.mean_var(mleaves, s, a)
    return g.add(mu, g.mul(model.std_var(mleaves, s), w))


@dataclass
class SyntheticTrajectory:
    states: np.ndarray      # (T+1, n)
    actions: np.ndarray     # (T+1, m)
    noise: np.ndarray       # (T, n)
    truncated: bool = False

    @property
    def horizon(self) -> int:
        return len(self.noise)


def rollout_batch(model: GenerativeModel, policy: Policy | None, s0: np.ndarray,
                  noise: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll a batch forward with supplied noise of shape (T, B, n).

    Returns ``(states (T+1,B,n), actions (T+1,B,m), truncated (B,))``.  A row
    whose state exceeds the blow-up threshold is frozen and flagged.
    """
    T, B = noise.shape[0], s0.shape[0]
    states = np.empty((T + 1, B, model.state_dim))
    actions = np.empty((T + 1, B, model.action_dim))
    truncated = np.zeros(B, dtype=bool)
    states[0] = s0
    for t in range(T):
        actions[t] = _actions(policy, states[t])
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = model.mean(states[t], actions[t]) + model.std(states[t]) * noise[t]
        bad = ~np.all(np.isfinite(nxt) & (np.abs(nxt) <= BLOWUP), axis=1)
        truncated |= bad
        states[t + 1] = np.where(truncated[:, None], states[t], nxt)
    actions[T] = _actions(policy, states[T])
    return states, actions, truncated


def rollout(model: GenerativeModel, policy: Policy | None, s0: np.ndarray, horizon: int,
            rng: np.random.Generator) -> SyntheticTrajectory:
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    noise = rng.standard_normal((horizon, 1, model.state_dim))
    states, actions, trunc = rollout_batch(model, policy, np.asarray(s0, dtype=float)[None], noise)
    return SyntheticTrajectory(states[:, 0], actions[:, 0], noise[:, 0], bool(trunc[0]))


def replay(model: GenerativeModel, policy: Policy | None, s0: np.ndarray,
           noise: np.ndarray) -> SyntheticTrajectory:
    """Synthetic trajectory driven by stored noise (e.g. a real episode's draws)."""
    states, actions, trunc = rollout_batch(model, policy, np.asarray(s0, dtype=float)[None],
                                           np.asarray(noise, dtype=float)[:, None])
    return SyntheticTrajectory(states[:, 0], actions[:, 0], np.asarray(noise), bool(trunc[0]))


# --------------------------------------------------------------------------- likelihood


def _transitions(trajs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs, acts, ys = [], [], []
    for tr in trajs:
        if len(tr.states) < 2:
            raise ContractError("trajectory needs at least two states")
        xs.append(tr.states[:-1])
        acts.append(tr.actions[:-1])
        ys.append(tr.states[1:])
    return np.concatenate(xs), np.concatenate(acts), np.concatenate(ys)


def nll_var(model: GenerativeModel, mleaves, s: np.ndarray, a: np.ndarray, nxt: np.ndarray,
            graph: Graph) -> Var:
    """Summed Gaussian negative log-likelihood of observed transitions."""
    g = graph
    sv = g.const(s)
    mu = model.mean_var(mleaves, sv, a)
    sd = model.std_var(mleaves, sv)
    z = g.div(g.sub(nxt, mu), sd)
    per = g.add(g.log(sd), g.mul(g.square(z), 0.5))
    return g.add(g.sum(per), HALF_LOG_2PI * per.value.size)


def gen_nll(model: GenerativeModel, policy: Policy | None, real) -> float:
    """Teacher-forced NLL of one trajectory (or a list of them), summed over steps.

    ``policy`` is accepted for signature symmetry; observed actions are used.
    """
    trajs = real if isinstance(real, (list, tuple)) else [real]
    s, a, y = _transitions(trajs)
    mu = model.mean(s, a)
    sd = model.std(s)
    z = (y - mu) / sd
    return float(np.sum(np.log(np.maximum(sd, 1e-12)) + 0.5 * z * z) + HALF_LOG_2PI * y.size)


def gen_nll_grad(model: GenerativeModel, trajs) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-transition NLL over ``trajs`` and its gradient in the model parameters."""
    s, a, y = _transitions(trajs)
    g = Graph()
    leaves = model.bind(g)
    loss = g.mul(nll_var(model, leaves, s, a, y, g), 1.0 / len(s))
    grads = g.backward(loss)
    return float(loss.value), {k: grads[k] for k in model.params()}


@dataclass
class GenTrainResult:
    model: GenerativeModel
    state: AdamState
    losses: list[float] = field(default_factory=list)


class DivergenceError(NumericError):
    pass


def train_generative(model: GenerativeModel, policy: Policy | None, dataset: Sequence,
                     steps: int, state: AdamState, rng: np.random.Generator,
                     batch_trajectories: int = 1) -> GenTrainResult:
    """``steps`` Adam steps on the mean NLL; each minibatch is whole trajectories.

    The policy is not touched; it is accepted so callers can pass the current
    one uniformly.
    """
    if not dataset:
        raise ContractError("dataset must be nonempty")
    losses = []
    params = model.params()
    for _ in range(steps):
        idx = rng.integers(len(dataset), size=batch_trajectories)
        loss, grads = gen_nll_grad(model, [dataset[i] for i in idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"generative loss diverged after {len(losses)} steps")
        params, state = adam_step(params, grads, state)
        model = model.with_params(params)
        losses.append(loss)
    return GenTrainResult(model, state, losses)
