"""Multi-layer perceptrons and the Adam optimizer on top of :mod:`diffcore`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .diffcore import ContractError, Graph, NumericError, ShapeError, Var

ACTIVATIONS = ("tanh", "identity", "sigmoid", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ContractError("MlpSpec needs at least input and output widths")
        if any(w < 0 for w in widths) or any(w == 0 for w in widths[1:]):
            raise ContractError(f"invalid layer widths {widths}")
        if self.hidden_activation != "tanh":
            raise ContractError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("identity", "sigmoid", "softplus"):
            raise ContractError(f"unsupported output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = (self.layer_widths[i], self.layer_widths[i + 1])
            out[f"b{i}"] = (self.layer_widths[i + 1],)
        return out


class ParamSet(Mapping[str, np.ndarray]):
    """Named float64 weight arrays; treated as an immutable value."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {}
        for k, v in arrays.items():
            a = np.array(v, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise NumericError(f"parameter {k!r} has non-finite entries")
            a.setflags(write=False)
            self._arrays[k] = a

    def __getitem__(self, key: str) -> np.ndarray:
        return self._arrays[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet) or list(self) != list(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def __repr__(self) -> str:
        return "ParamSet(" + ", ".join(f"{k}:{v.shape}" for k, v in self.items()) + ")"

    def replace(self, **arrays) -> "ParamSet":
        merged = dict(self._arrays)
        merged.update(arrays)
        return ParamSet(merged)

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self.items()})

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def check_spec(self, spec: MlpSpec) -> None:
        shapes = spec.shapes()
        if set(shapes) != set(self):
            raise ShapeError(f"parameter names {sorted(self)} do not match spec {sorted(shapes)}")
        for k, s in shapes.items():
            if self[k].shape != s:
                raise ShapeError(f"parameter {k!r} has shape {self[k].shape}, spec wants {s}")

    def bind(self, graph: Graph, prefix: str, requires_grad: bool = True) -> dict[str, Var]:
        return {k: graph.leaf(f"{prefix}.{k}", v, requires_grad) for k, v in self.items()}


def init_params(spec: MlpSpec, seed: int) -> ParamSet:
    """Xavier-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))
    arrays = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(arrays)


def _check_input(spec: MlpSpec, width: int) -> None:
    if width != spec.in_width:
        raise ContractError(f"MLP input width {width} does not match spec width {spec.in_width}")


def mlp_forward(params: Mapping[str, Var], spec: MlpSpec, x: Var) -> Var:
    """Differentiable forward pass; ``params`` are graph leaves (see ParamSet.bind)."""
    if x.value.ndim != 2:
        raise ShapeError(f"MLP input must be 2-D (batch, width), got {x.shape}")
    _check_input(spec, x.shape[1])
    g = x.graph
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = g.add(g.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < last:
            h = g.tanh(h)
    if spec.output_activation == "sigmoid":
        h = g.sigmoid(h)
    elif spec.output_activation == "softplus":
        h = g.softplus(h)
    return h


def _np_sigmoid(x):
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def mlp_apply(params: ParamSet, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Gradient-free numpy evaluation matching :func:`mlp_forward` exactly."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"MLP input must be 2-D (batch, width), got {x.shape}")
    _check_input(spec, x.shape[1])
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < last:
            h = np.tanh(h)
    if spec.output_activation == "sigmoid":
        h = _np_sigmoid(h)
    elif spec.output_activation == "softplus":
        h = np.maximum(h, 0.0) + np.log1p(np.exp(-np.abs(h)))
    return h


@dataclass
class AdamState:
    lr: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, lr: float) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.lr, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdamState):
            return NotImplemented
        same = (self.lr, self.step, self.beta1, self.beta2, self.eps) == \
               (other.lr, other.step, other.beta1, other.beta2, other.eps)
        return same and _dicts_equal(self.m, other.m) and _dicts_equal(self.v, other.v)


def _dicts_equal(a, b) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState
              ) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam step.  Pure: inputs are not modified."""
    for k in params:
        if k not in grads:
            raise ContractError(f"missing gradient for parameter {k!r}")
        g = np.asarray(grads[k])
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return ParamSet(new_p), AdamState(state.lr, new_m, new_v, t, b1, b2, state.eps)


@dataclass
class Policy:
    """Deterministic policy ``a = bound * tanh(mlp(s))``."""

    params: ParamSet
    spec: MlpSpec
    action_bound: float

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return self.action_bound * np.tanh(mlp_apply(self.params, self.spec, states))

    def forward(self, leaves: Mapping[str, Var], states: Var) -> Var:
        g = states.graph
        return g.mul(g.tanh(mlp_forward(leaves, self.spec, states)), self.action_bound)

    def bind(self, graph: Graph, requires_grad: bool = True) -> dict[str, Var]:
        return self.params.bind(graph, "policy", requires_grad)

    def with_params(self, params: ParamSet) -> "Policy":
        return Policy(params, self.spec, self.action_bound)
