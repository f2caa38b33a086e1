"""Run configuration, TOML parsing and seeded random substreams."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import tomli


class ConfigError(ValueError):
    """Invalid or unknown configuration key; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class TrainConfig:
    env_name: str = "2d"
    horizon: int | None = None
    dt: float | None = None
    policy_widths: tuple[int, ...] = (64, 64)
    drift_widths: tuple[int, ...] = (64, 64)
    diffusion_widths: tuple[int, ...] = (64, 64)
    barrier_widths: tuple[int, ...] = (64, 64)
    outer_iters: int = 300
    inner_gen_steps: int = 50
    lie_samples: int = 10
    lam: float = 1.0
    gamma: float = 0.99
    lr_policy: float = 1e-3
    lr_model: float = 1e-3
    lr_barrier: float = 1e-2
    batch_real: int = 16
    batch_synthetic: int = 64
    seed: int = 0
    pairs: int = 100
    retrain_steps: int = 2000
    init_samples: int = 1000
    unsafe_samples: int = 1000

    def __post_init__(self):
        for name in ("outer_iters", "inner_gen_steps", "lie_samples", "batch_real",
                     "batch_synthetic", "pairs", "init_samples", "unsafe_samples"):
            val = getattr(self, name)
            # outer_iters = 0 is the documented no-op run
            low = 0 if name == "outer_iters" else 1
            if not isinstance(val, int) or val < low:
                raise ConfigError(name, f"must be an integer >= {low}, got {val!r}")
        if self.retrain_steps < 0:
            raise ConfigError("retrain_steps", "must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma", "must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        for name in ("lr_policy", "lr_model", "lr_barrier"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt", "must be positive")
        for name in ("policy_widths", "drift_widths", "diffusion_widths", "barrier_widths"):
            widths = tuple(getattr(self, name))
            if not widths or any(not isinstance(w, int) or w < 1 for w in widths):
                raise ConfigError(name, f"must be a nonempty list of positive integers, got {widths!r}")
            object.__setattr__(self, name, widths)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


# file key -> (TrainConfig field, expected python types)
_KEYS: dict[str, tuple[str, tuple[type, ...]]] = {
    "environment.name": ("env_name", (str,)),
    "environment.horizon": ("horizon", (int,)),
    "environment.dt": ("dt", (float, int)),
    "networks.policy.widths": ("policy_widths", (list,)),
    "networks.drift.widths": ("drift_widths", (list,)),
    "networks.diffusion.widths": ("diffusion_widths", (list,)),
    "networks.barrier.widths": ("barrier_widths", (list,)),
    "training.outer_iters": ("outer_iters", (int,)),
    "training.inner_gen_steps": ("inner_gen_steps", (int,)),
    "training.lie_samples": ("lie_samples", (int,)),
    "training.lambda": ("lam", (float, int)),
    "training.gamma": ("gamma", (float, int)),
    "training.lr_policy": ("lr_policy", (float, int)),
    "training.lr_model": ("lr_model", (float, int)),
    "training.lr_barrier": ("lr_barrier", (float, int)),
    "training.batch_real": ("batch_real", (int,)),
    "training.batch_synthetic": ("batch_synthetic", (int,)),
    "training.seed": ("seed", (int,)),
    "certification.pairs": ("pairs", (int,)),
    "certification.retrain_steps": ("retrain_steps", (int,)),
    "certification.init_samples": ("init_samples", (int,)),
    "certification.unsafe_samples": ("unsafe_samples", (int,)),
}
SECTIONS = ("environment", "networks", "training", "certification")
CONFIG_KEYS = tuple(_KEYS)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_config(text: str) -> TrainConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from None
    for section in doc:
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    kw = {}
    for key, value in _flatten(doc).items():
        if key not in _KEYS:
            raise ConfigError(key, "unknown key")
        name, types = _KEYS[key]
        if isinstance(value, bool) or not isinstance(value, types):
            raise ConfigError(key, f"expected {'/'.join(t.__name__ for t in types)}, got {value!r}")
        if name.endswith("_widths"):
            if not all(isinstance(w, int) and not isinstance(w, bool) for w in value):
                raise ConfigError(key, "widths must be integers")
            value = tuple(value)
        elif float in types:
            value = float(value)
        kw[name] = value
    try:
        return TrainConfig(**kw)
    except ConfigError as exc:
        inverse = {v[0]: k for k, v in _KEYS.items()}
        raise ConfigError(inverse.get(exc.key, exc.key), str(exc).split(": ", 1)[-1]) from None


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def bundled_config(name: str) -> Path | None:
    """Path of a shipped configuration (``2d``, ``cartpole``, ``smoke``), if it exists."""
    path = Path(__file__).with_name("configs") / f"{name}.toml"
    return path if path.is_file() else None


def dump_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` as a TOML document accepted by :func:`parse_config`."""
    sections: dict[str, list[str]] = {s: [] for s in SECTIONS}
    for key, (name, _) in _KEYS.items():
        val = getattr(cfg, name)
        if val is None:
            continue
        section, rest = key.split(".", 1)
        if isinstance(val, tuple):
            text = "[" + ", ".join(str(v) for v in val) + "]"
        elif isinstance(val, str):
            text = f'"{val}"'
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        sections[section].append(f"{rest} = {text}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


# --------------------------------------------------------------------------- randomness

STREAMS = ("env", "model", "barrier", "policy", "eval", "cert", "init")


def stream_seed(master: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & (2**64 - 1), zlib.crc32(name.encode())])


def make_stream(master: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master, name)))


def init_seed(master: int, name: str) -> int:
    """64-bit seed for network initialisation, derived from the master seed."""
    return int(stream_seed(master, "init/" + name).generate_state(1, np.uint64)[0])


@dataclass
class RngStreams:
    """Named, independently re-seedable generators derived from one master seed."""

    master: int
    streams: dict[str, np.random.Generator] = field(default_factory=dict)

    def __post_init__(self):
        for name in STREAMS:
            self.streams.setdefault(name, make_stream(self.master, name))

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.streams[name]

    def state(self) -> dict[str, Any]:
        return {k: g.bit_generator.state for k, g in self.streams.items()}

    @classmethod
    def from_state(cls, master: int, state: dict[str, Any]) -> "RngStreams":
        out = cls(master)
        for k, st in state.items():
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = st
            out.streams[k] = g
        return out
