"""Simulated plants, region geometry, episodes and empirical safety statistics.

Both plants are vectorised over a leading batch axis.  Every step consumes a
full ``(batch, n)`` block of standard-normal draws even when the plant only
injects noise on some coordinates; this keeps real and synthetic rollouts
pairable with common random numbers.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .diffcore import ContractError, Graph, Var

PolicyFn = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------- regions


@dataclass(frozen=True)
class Region:
    """Axis-aligned box (infinite bounds allowed) or a ball over a subset of dims."""

    kind: str
    dim: int
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == "box":
            if len(self.lo) != self.dim or len(self.hi) != self.dim:
                raise ContractError("box bounds must match region dimension")
            if any(lo > hi for lo, hi in zip(self.lo, self.hi)):
                raise ContractError(f"empty box interval in {self.lo} .. {self.hi}")
        elif self.kind == "ball":
            if self.radius < 0:
                raise ContractError("ball radius must be nonnegative")
            if len(self.center) != len(self.dims) or not self.dims:
                raise ContractError("ball center must match its dimension subset")
            if any(d < 0 or d >= self.dim for d in self.dims):
                raise ContractError(f"ball dims {self.dims} out of range for dimension {self.dim}")
        elif self.kind != "empty":
            raise ContractError(f"unknown region kind {self.kind!r}")

    @classmethod
    def box(cls, intervals: Sequence[tuple[float | None, float | None]]) -> "Region":
        """Box from per-dimension ``(lo, hi)``; ``None`` leaves a side unbounded."""
        lo = tuple(-np.inf if a is None else float(a) for a, _ in intervals)
        hi = tuple(np.inf if b is None else float(b) for _, b in intervals)
        return cls("box", len(intervals), lo=lo, hi=hi)

    @classmethod
    def ball(cls, dim: int, center: Sequence[float], radius: float,
             dims: Sequence[int] | None = None) -> "Region":
        dims = tuple(range(dim)) if dims is None else tuple(int(d) for d in dims)
        return cls("ball", dim, center=tuple(float(c) for c in center),
                   radius=float(radius), dims=dims)

    @classmethod
    def empty(cls, dim: int) -> "Region":
        return cls("empty", dim)

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "dim": self.dim,
                    "lo": [None if np.isinf(v) else v for v in self.lo],
                    "hi": [None if np.isinf(v) else v for v in self.hi]}
        if self.kind == "ball":
            return {"kind": "ball", "dim": self.dim, "center": list(self.center),
                    "radius": self.radius, "dims": list(self.dims)}
        return {"kind": "empty", "dim": self.dim}


def contains(region: Region, s: np.ndarray) -> np.ndarray | bool:
    """Closed-set membership of a state (1-D) or a batch of states (2-D)."""
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    batch = s[None, :] if single else s
    if batch.ndim != 2 or batch.shape[1] != region.dim:
        raise ContractError(f"state of shape {s.shape} does not match region dimension {region.dim}")
    if region.kind == "box":
        inside = np.all((batch >= np.array(region.lo)) & (batch <= np.array(region.hi)), axis=1)
    elif region.kind == "ball":
        d = batch[:, list(region.dims)] - np.array(region.center)
        inside = np.sum(d * d, axis=1) <= region.radius**2
    else:
        inside = np.zeros(batch.shape[0], dtype=bool)
    return bool(inside[0]) if single else inside


def minkowski_enlarge(region: Region, delta: np.ndarray) -> Region:
    """Minkowski sum of ``region`` with the box ``[-delta, delta]``.

    A ball grows by the Euclidean norm of ``delta`` over its own dims, which
    over-approximates the exact (rounded-box) sum.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (region.dim,):
        raise ContractError(f"delta of shape {delta.shape} does not match dimension {region.dim}")
    if np.any(delta < 0) or not np.all(np.isfinite(delta)):
        raise ContractError("delta must be finite and nonnegative")
    if region.kind == "box":
        return replace(region, lo=tuple(np.array(region.lo) - delta),
                       hi=tuple(np.array(region.hi) + delta))
    if region.kind == "ball":
        grow = float(np.linalg.norm(delta[list(region.dims)]))
        return replace(region, radius=region.radius + grow)
    return region


def sample_region(region: Region, bounds: Region, rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform samples from ``region`` intersected with the bounding box ``bounds``."""
    if region.kind == "empty":
        raise ContractError("cannot sample from an empty region")
    if bounds.kind != "box" or bounds.dim != region.dim:
        raise ContractError("bounds must be a box of matching dimension")
    blo, bhi = np.array(bounds.lo), np.array(bounds.hi)
    if region.kind == "box":
        lo = np.maximum(np.array(region.lo), blo)
        hi = np.minimum(np.array(region.hi), bhi)
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractError("region does not intersect the bounding box")
        return lo + (hi - lo) * rng.random((count, region.dim))
    out = blo + (bhi - blo) * rng.random((count, region.dim))
    k = len(region.dims)
    direction = rng.standard_normal((count, k))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = region.radius * rng.random(count) ** (1.0 / k)
    out[:, list(region.dims)] = np.array(region.center) + direction * r[:, None]
    return out


# --------------------------------------------------------------------------- plants


def step_2d(s: np.ndarray, a: np.ndarray, xi: np.ndarray, dt: float = 0.05,
            noise: float = 0.2) -> np.ndarray:
    """Euler-Maruyama step of s1' = 0.8 s2, ds2 = (a - 0.3 s1^3) dt + noise dW."""
    s1, s2 = s[..., 0], s[..., 1]
    u = a[..., 0]
    n1 = s1 + 0.8 * s2 * dt
    n2 = s2 + (u - 0.3 * s1**3) * dt + noise * np.sqrt(dt) * xi[..., 1]
    return np.stack([n1, n2], axis=-1)


CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
GRAVITY = 9.8


def cartpole_accel(s: np.ndarray, force: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    theta, theta_dot = s[..., 1], s[..., 3]
    total = CART_MASS + POLE_MASS
    pml = POLE_MASS * POLE_HALF_LENGTH
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + pml * theta_dot**2 * sin) / total
    theta_acc = (GRAVITY * sin - cos * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos**2 / total))
    x_acc = temp - pml * theta_acc * cos / total
    return x_acc, theta_acc


def step_cartpole(s: np.ndarray, a: np.ndarray, xi: np.ndarray, dt: float = 0.02,
                  noise: float = 0.01) -> np.ndarray:
    """Semi-implicit Euler cart-pole step; state is [x, theta, x_dot, theta_dot]."""
    x_acc, theta_acc = cartpole_accel(s, a[..., 0])
    sd = noise * np.sqrt(dt)
    x_dot = s[..., 2] + dt * x_acc + sd * xi[..., 2]
    theta_dot = s[..., 3] + dt * theta_acc + sd * xi[..., 3]
    x = s[..., 0] + dt * x_dot
    theta = s[..., 1] + dt * theta_dot
    return np.stack([x, theta, x_dot, theta_dot], axis=-1)


@dataclass(frozen=True)
class QuadraticCost:
    """Reward r(s, a) = -(sum_k w_k s_k^2 + sum_j v_j a_j^2)."""

    state_weights: tuple[float, ...]
    action_weights: tuple[float, ...]

    def __call__(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return -(s**2 @ np.array(self.state_weights) + a**2 @ np.array(self.action_weights))

    def var(self, s: Var, a: Var) -> Var:
        g: Graph = s.graph
        ws = np.array(self.state_weights).reshape(-1, 1)
        wa = np.array(self.action_weights).reshape(-1, 1)
        cost = g.add(g.matmul(g.square(s), ws), g.matmul(g.square(a), wa))
        return g.mul(g.sum(cost, axis=1), -1.0)


REWARDS = {
    "quadratic_2d": QuadraticCost((1.0, 1.0), (0.1,)),
    "quadratic_cartpole": QuadraticCost((1.0, 10.0, 0.1, 0.1), (0.001,)),
}

STEPS = {"2d": step_2d, "cartpole": step_cartpole}


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float
    horizon: int
    init_region: Region
    unsafe_region: Region
    state_region: Region
    action_bound: float
    reward_fn: str
    noise_scale: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        if self.horizon < 1:
            raise ContractError("horizon must be at least 1")

    @property
    def reward(self) -> QuadraticCost:
        return REWARDS[self.reward_fn]

    def step(self, s: np.ndarray, a: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return STEPS[self.name](s, a, xi, dt=self.dt, noise=self.noise_scale)


def make_env(name: str, horizon: int | None = None, dt: float | None = None) -> EnvSpec:
    if name == "2d":
        spec = EnvSpec(
            name="2d", state_dim=2, action_dim=1, dt=0.05, horizon=100,
            init_region=Region.ball(2, (-2.0, 0.0), 0.1),
            unsafe_region=Region.box([(-1.0, 0.0), (1.2, 1.7)]),
            state_region=Region.box([(-3.0, 3.0), (-3.0, 3.0)]),
            action_bound=3.0, reward_fn="quadratic_2d", noise_scale=0.2)
    elif name == "cartpole":
        spec = EnvSpec(
            name="cartpole", state_dim=4, action_dim=1, dt=0.02, horizon=150,
            init_region=Region.box([(-0.167, 0.033), (-0.6, -0.5), (-0.35, -0.35), (0.53, 0.53)]),
            unsafe_region=Region.box([(None, -0.75), (None, None), (None, None), (None, None)]),
            state_region=Region.box([(-2.4, 2.4), (-1.2, 1.2), (-3.0, 3.0), (-4.0, 4.0)]),
            action_bound=10.0, reward_fn="quadratic_cartpole", noise_scale=0.01)
    else:
        raise ContractError(f"unknown environment {name!r}")
    if horizon is not None:
        spec = replace(spec, horizon=int(horizon))
    if dt is not None:
        spec = replace(spec, dt=float(dt))
    return spec


# --------------------------------------------------------------------------- episodes


@dataclass
class Trajectory:
    states: np.ndarray              # (T+1, n)
    actions: np.ndarray             # (T+1, m)
    rewards: np.ndarray             # (T+1,)
    unsafe_hit: int | None = None
    noise: np.ndarray | None = field(default=None, repr=False)  # (T, n)

    def __post_init__(self):
        if self.unsafe_hit is not None and not 0 <= self.unsafe_hit < len(self.states):
            raise ContractError("unsafe_hit index out of range")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    def to_csv(self, unsafe: Region | None = None) -> str:
        """One row per timestep: t, state components, action components, reward, unsafe flag."""
        n, m = self.states.shape[1], self.actions.shape[1]
        flags = (contains(unsafe, self.states) if unsafe is not None
                 else np.zeros(len(self.states), dtype=bool))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"s{k}" for k in range(n)] + [f"a{j}" for j in range(m)]
                   + ["reward", "unsafe"])
        for t in range(len(self.states)):
            w.writerow([t] + [repr(float(v)) for v in self.states[t]]
                       + [repr(float(v)) for v in self.actions[t]]
                       + [repr(float(self.rewards[t])), int(flags[t])])
        return buf.getvalue()


def sample_initial(spec: EnvSpec, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the initial region; a single state when ``count`` is None."""
    out = sample_region(spec.init_region, spec.state_region, rng, 1 if count is None else count)
    return out[0] if count is None else out


def run_episodes(spec: EnvSpec, policy: PolicyFn, rng: np.random.Generator, count: int,
                 init_states: np.ndarray | None = None) -> list[Trajectory]:
    """Roll ``count`` independent episodes in one vectorised batch."""
    s = sample_initial(spec, rng, count) if init_states is None else np.array(init_states, dtype=float)
    T, n = spec.horizon, spec.state_dim
    states = np.empty((T + 1, count, n))
    noise = rng.standard_normal((T, count, n))
    actions = np.empty((T + 1, count, spec.action_dim))
    states[0] = s
    for t in range(T):
        actions[t] = policy(states[t])
        states[t + 1] = spec.step(states[t], actions[t], noise[t])
    actions[T] = policy(states[T])
    rewards = spec.reward(states.reshape(-1, n), actions.reshape(-1, spec.action_dim)).reshape(T + 1, count)
    hits = contains(spec.unsafe_region, states.reshape(-1, n)).reshape(T + 1, count)
    out = []
    for i in range(count):
        idx = np.flatnonzero(hits[:, i])
        out.append(Trajectory(states[:, i].copy(), actions[:, i].copy(), rewards[:, i].copy(),
                              int(idx[0]) if idx.size else None, noise[:, i].copy()))
    return out


def run_episode(spec: EnvSpec, policy: PolicyFn, rng: np.random.Generator) -> Trajectory:
    return run_episodes(spec, policy, rng, 1)[0]


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def empirical_safe_rate(spec: EnvSpec, policy: PolicyFn, episodes: int,
                        rng: np.random.Generator) -> float:
    """Fraction of episodes that never enter the unsafe region."""
    if episodes < 1:
        raise ContractError("episodes must be >= 1")
    if spec.unsafe_region.kind == "empty":
        return 1.0
    trajs = run_episodes(spec, policy, rng, episodes)
    return sum(tr.unsafe_hit is None for tr in trajs) / episodes


def max_state_gap(real: Sequence, synth: Sequence) -> np.ndarray:
    """Componentwise max over pairs and time of |s_k(t) - s_hat_k(t)|."""
    if len(real) != len(synth) or not real:
        raise ContractError("need equally many (and at least one) real and synthetic trajectories")
    gaps = []
    for r, s in zip(real, synth):
        rs, ss = np.asarray(getattr(r, "states", r)), np.asarray(getattr(s, "states", s))
        if rs.shape != ss.shape:
            raise ContractError(f"paired trajectories differ in shape: {rs.shape} vs {ss.shape}")
        gaps.append(np.max(np.abs(rs - ss), axis=0))
    return np.max(gaps, axis=0)
