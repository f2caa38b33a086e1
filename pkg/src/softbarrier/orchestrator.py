"""Joint training loop (model fit, barrier step, policy step) and run persistence."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .barrier import (TRAIN_LIE_MODE, BarrierNet, SafetyCertificate, barrier_loss, certify, make_batch,
                      synthetic_pool, train_barrier)
from .checkpoint import Checkpoint, save_checkpoint
from .config import RngStreams, TrainConfig, init_seed, make_stream
from .diffcore import NumericError
from .envs import (EnvSpec, Trajectory, discounted_return, make_env, max_state_gap,
                   minkowski_enlarge, run_episodes, sample_initial)
from .nn import AdamState, MlpSpec, Policy, adam_step, init_params
from .policyopt import combined_policy_update, synthetic_return
from .sdegen import GenerativeModel, replay, rollout_batch, train_generative

log = logging.getLogger(__name__)

CHECKPOINT_EVERY = 25
GEN_BATCH = 4  # replay trajectories per generative Adam step
METRICS = ("gen_nll", "barrier_loss", "barrier_init", "barrier_unsafe", "barrier_lie",
           "return_hat", "model_gap", "real_return", "real_unsafe_rate")
BARRIER_UNSAFE_DONE = 0.05


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``checkpoint`` is the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainState:
    config: TrainConfig
    env: EnvSpec
    policy: Policy
    model: GenerativeModel
    barrier: BarrierNet
    adam: dict[str, AdamState]
    rngs: RngStreams
    iteration: int = 0
    replay: list[Trajectory] = field(default_factory=list)
    metrics: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in METRICS})


def env_for(config: TrainConfig) -> EnvSpec:
    return make_env(config.env_name, horizon=config.horizon, dt=config.dt)


def initial_state(config: TrainConfig) -> TrainState:
    env = env_for(config)
    n, m = env.state_dim, env.action_dim
    pspec = MlpSpec((n, *config.policy_widths, m))
    policy = Policy(init_params(pspec, init_seed(config.seed, "policy")), pspec, env.action_bound)
    model = GenerativeModel.create(n, m, hidden=config.drift_widths,
                                   diffusion_hidden=config.diffusion_widths,
                                   seed=init_seed(config.seed, "model") % 2**62)
    barrier = BarrierNet.create(n, config.barrier_widths, seed=init_seed(config.seed, "barrier"))
    adam = {"policy": AdamState.fresh(policy.params, config.lr_policy),
            "model": AdamState.fresh(model.params(), config.lr_model),
            "barrier": AdamState.fresh(barrier.params, config.lr_barrier)}
    return TrainState(config, env, policy, model, barrier, adam, RngStreams(config.seed))


def to_checkpoint(st: TrainState) -> Checkpoint:
    return Checkpoint(
        config=st.config, policy=st.policy.params, model=st.model.params(),
        barrier=st.barrier.params, adam={k: v.copy() for k, v in st.adam.items()},
        iteration=st.iteration, rng_state=st.rngs.state(),
        replay_states=[t.states for t in st.replay], replay_actions=[t.actions for t in st.replay],
        metrics={k: list(v) for k, v in st.metrics.items()})


def from_checkpoint(ck: Checkpoint) -> TrainState:
    st = initial_state(ck.config)
    st.policy = st.policy.with_params(ck.policy)
    st.model = st.model.with_params(ck.model)
    st.barrier = st.barrier.with_params(ck.barrier)
    st.adam = {k: v.copy() for k, v in ck.adam.items()}
    st.rngs = RngStreams.from_state(ck.config.seed, ck.rng_state)
    st.iteration = ck.iteration
    reward = st.env.reward
    st.replay = [Trajectory(s, a, reward(s, a)) for s, a in zip(ck.replay_states, ck.replay_actions)]
    st.metrics = {k: list(ck.metrics.get(k, [])) for k in METRICS}
    return st


def paired_model_gap(model: GenerativeModel, policy: Policy, real: list[Trajectory]) -> float:
    """Mean per-step Euclidean gap of model rollouts driven by the real episodes' noise."""
    gaps = []
    for tr in real:
        syn = replay(model, policy, tr.states[0], tr.noise)
        gaps.append(np.mean(np.linalg.norm(tr.states - syn.states, axis=1)))
    return float(np.mean(gaps))


def train_iteration(st: TrainState) -> dict[str, float]:
    """One outer iteration; mutates ``st`` and returns the logged metrics."""
    cfg, env = st.config, st.env
    real = run_episodes(env, st.policy, st.rngs["env"], cfg.batch_real)
    st.replay.extend(real)

    gen = train_generative(st.model, st.policy, st.replay, cfg.inner_gen_steps,
                           st.adam["model"], st.rngs["model"], batch_trajectories=GEN_BATCH)
    st.model, st.adam["model"] = gen.model, gen.state

    pool = synthetic_pool(st.model, st.policy, env, st.rngs["barrier"], cfg.batch_synthetic)
    batch = make_batch(env, env.unsafe_region, pool, st.rngs["barrier"], cfg.batch_synthetic,
                       cfg.lie_samples)
    bl = barrier_loss(st.barrier, st.model, st.policy, batch, lie=TRAIN_LIE_MODE)
    s0 = sample_initial(env, st.rngs["policy"], cfg.batch_synthetic)
    ret = synthetic_return(st.model, st.policy, s0, env.horizon, cfg.gamma, env.reward,
                           rng=st.rngs["policy"], with_grads=True)
    for name, val in (("barrier loss", bl.total), ("synthetic return", ret.value)):
        if not math.isfinite(val):
            raise NumericError(f"{name} is not finite")

    bparams, st.adam["barrier"] = adam_step(st.barrier.params, bl.grads_barrier, st.adam["barrier"])
    pparams, st.adam["policy"] = combined_policy_update(
        st.policy.params, bl.grads_policy, ret.grads, st.adam["policy"], cfg.lam)
    st.barrier = st.barrier.with_params(bparams)
    st.policy = st.policy.with_params(pparams)

    row = {
        "gen_nll": float(np.mean(gen.losses)) if gen.losses else float("nan"),
        "barrier_loss": bl.total, "barrier_init": bl.init_term,
        "barrier_unsafe": bl.unsafe_term, "barrier_lie": bl.lie_mean,
        "return_hat": ret.value,
        "model_gap": paired_model_gap(st.model, st.policy, real[:4]),
        "real_return": float(np.mean([discounted_return(t.rewards, cfg.gamma) for t in real])),
        "real_unsafe_rate": float(np.mean([t.unsafe_hit is not None for t in real])),
    }
    for k in METRICS:
        st.metrics[k].append(row[k])
    st.iteration += 1
    return row


@dataclass
class RunReport:
    metrics: dict[str, list[float]]
    certificate: SafetyCertificate | None = None
    safe_rate: float | None = None
    barrier_converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.metrics.get("return_hat", []))

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "metrics": self.metrics,
                "barrier_converged": self.barrier_converged,
                "certificate": None if self.certificate is None else self.certificate.to_dict(),
                "safe_rate": self.safe_rate}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        (out / "metrics").mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        for name, series in self.metrics.items():
            with open(out / "metrics" / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iteration", name])
                for i, v in enumerate(series):
                    w.writerow([i, repr(float(v))])


def barrier_converged(metrics: dict[str, list[float]]) -> bool:
    """Stopping rule: unsafe term (near) zero and Lie term non-positive at the last iteration."""
    if not metrics.get("barrier_unsafe"):
        return False
    return metrics["barrier_unsafe"][-1] <= BARRIER_UNSAFE_DONE and metrics["barrier_lie"][-1] <= 0.0


def run_training(config: TrainConfig, out_dir: str | Path | None = None,
                 resume: Checkpoint | None = None, stop_after: int | None = None,
                 checkpoint_every: int = CHECKPOINT_EVERY,
                 on_iteration: Callable[[int, dict], None] | None = None
                 ) -> tuple[Checkpoint, RunReport]:
    """Run (or resume) the outer loop up to ``config.outer_iters`` iterations.

    ``stop_after`` caps the number of iterations executed in this call, which
    is how interrupted runs are simulated.  A resumed run keeps the
    checkpoint's configuration except for ``outer_iters``.
    """
    if resume is not None:
        st = from_checkpoint(resume)
        st.config = st.config.replace(outer_iters=config.outer_iters)
    else:
        st = initial_state(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_good = to_checkpoint(st)
    done = 0
    while st.iteration < st.config.outer_iters and (stop_after is None or done < stop_after):
        try:
            row = train_iteration(st)
        except NumericError as exc:
            if out is not None:
                save_checkpoint(out / "last_good.ckpt", last_good)
            raise TrainingAborted(f"iteration {st.iteration}: {exc}", last_good) from exc
        done += 1
        last_good = to_checkpoint(st)
        if on_iteration is not None:
            on_iteration(st.iteration, row)
        if out is not None and st.iteration % checkpoint_every == 0:
            save_checkpoint(out / f"iter_{st.iteration:05d}.ckpt", last_good)
    ck = last_good
    report = RunReport(ck.metrics, barrier_converged=barrier_converged(ck.metrics))
    if out is not None:
        save_checkpoint(out / "final.ckpt", ck)
        report.write(out)
    return ck, report


# --------------------------------------------------------------------------- practical bound


def retrain_and_certify(st: TrainState, unsafe, rng: np.random.Generator, retrain_steps: int,
                        n_traj: int, n_mc: int = 10_000, batch_size: int = 128,
                        pool_size: int = 1024) -> tuple[BarrierNet, SafetyCertificate]:
    """Fit a fresh barrier against ``unsafe`` with policy and model frozen, then certify it."""
    cfg, env = st.config, st.env
    fresh = BarrierNet.create(env.state_dim, cfg.barrier_widths,
                              seed=init_seed(cfg.seed, "barrier/retrain"))
    pool = synthetic_pool(st.model, st.policy, env, rng, pool_size)
    state = AdamState.fresh(fresh.params, cfg.lr_barrier)
    barrier, _, _ = train_barrier(fresh, state, st.model, st.policy, env, unsafe, pool, rng,
                                  retrain_steps, batch_size, cfg.lie_samples)
    cert = certify(barrier, st.model, st.policy, env, rng, n_init=cfg.init_samples,
                   n_unsafe=cfg.unsafe_samples, n_traj=n_traj, n_mc=n_mc,
                   lie_samples=cfg.lie_samples, unsafe=unsafe)
    return barrier, cert


def measure_gap(st: TrainState, rng: np.random.Generator, n_pairs: int) -> np.ndarray:
    """Max per-coordinate gap between real episodes and noise-matched model rollouts."""
    real = run_episodes(st.env, st.policy, rng, n_pairs)
    s0 = np.stack([t.states[0] for t in real])
    noise = np.stack([t.noise for t in real], axis=1)
    states, _, _ = rollout_batch(st.model, st.policy, s0, noise)
    return max_state_gap(real, [states[:, i] for i in range(n_pairs)])


def practical_bound(ck: Checkpoint, n_pairs: int | None = None, retrain_steps: int | None = None,
                    rng: np.random.Generator | None = None, delta_scale: float = 1.0,
                    n_mc: int = 10_000) -> tuple[SafetyCertificate, BarrierNet]:
    """Gap-enlarged certification of the final policy.

    1. measure the per-coordinate gap between paired real and model rollouts;
    2. enlarge the unsafe set by that gap (times ``delta_scale``);
    3. train a fresh barrier against the enlarged set;
    4. report one minus the largest barrier value along the synthetic rollouts.
    """
    st = from_checkpoint(ck)
    cfg = st.config
    n_pairs = cfg.pairs if n_pairs is None else n_pairs
    retrain_steps = cfg.retrain_steps if retrain_steps is None else retrain_steps
    rng = RngStreams(cfg.seed)["cert"] if rng is None else rng
    delta = measure_gap(st, rng, n_pairs) * float(delta_scale)
    unsafe = minkowski_enlarge(st.env.unsafe_region, delta)
    barrier, cert = retrain_and_certify(st, unsafe, rng, retrain_steps, n_pairs, n_mc=n_mc)
    cert.delta = [float(d) for d in delta]
    return cert, barrier


def evaluate_policy(ck: Checkpoint, episodes: int, seed: int | None = None) -> dict:
    """Safe rate and mean discounted return of the checkpoint's policy on the real plant."""
    st = from_checkpoint(ck)
    seed = ck.config.seed if seed is None else seed
    trajs = run_episodes(st.env, st.policy, make_stream(seed, "eval"), episodes)
    safe = sum(t.unsafe_hit is None for t in trajs) / episodes
    ret = float(np.mean([discounted_return(t.rewards, ck.config.gamma) for t in trajs]))
    return {"safe_rate": safe, "mean_return": ret, "episodes": episodes, "seed": seed}
