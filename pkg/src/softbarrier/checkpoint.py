"""Versioned binary checkpoint container.

Layout (little endian)::

    b"SBRL" | u32 version | u32 section count
    per section: u16 name length | name (utf-8) | u64 payload length | u32 crc32 | payload
    payload:     u32 header length | header (JSON, utf-8) | u32 array count
                 per array: u16 name length | name | u8 ndim | u64 dims... | float64 data

Floats inside JSON headers are written with ``repr`` and so round-trip
exactly; arrays are raw IEEE doubles.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import TrainConfig
from .nn import AdamState, ParamSet

MAGIC = b"SBRL"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    policy: ParamSet
    model: ParamSet
    barrier: ParamSet
    adam: dict[str, AdamState]
    iteration: int
    rng_state: dict[str, Any]
    replay_states: list[np.ndarray] = field(default_factory=list)
    replay_actions: list[np.ndarray] = field(default_factory=list)
    metrics: dict[str, list[float]] = field(default_factory=dict)
    version: int = VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.config == other.config
                and self.policy == other.policy and self.model == other.model
                and self.barrier == other.barrier and self.adam == other.adam
                and self.iteration == other.iteration and self.rng_state == other.rng_state
                and _arrays_equal(self.replay_states, other.replay_states)
                and _arrays_equal(self.replay_actions, other.replay_actions)
                and json.dumps(self.metrics, sort_keys=True) == json.dumps(other.metrics, sort_keys=True))


def _arrays_equal(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------- encoding


def _encode_payload(header: Any, arrays: dict[str, np.ndarray]) -> bytes:
    h = json.dumps(header, sort_keys=True).encode()
    parts = [struct.pack("<I", len(h)), h, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def _adam_section(state: AdamState) -> tuple[dict, dict[str, np.ndarray]]:
    header = {"lr": state.lr, "step": state.step, "beta1": state.beta1, "beta2": state.beta2,
              "eps": state.eps, "names": list(state.m)}
    arrays = {f"m/{k}": v for k, v in state.m.items()}
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    return header, arrays


def encode(ck: Checkpoint) -> bytes:
    sections: list[tuple[str, bytes]] = [
        ("meta", _encode_payload({"iteration": ck.iteration}, {})),
        ("config", _encode_payload(ck.config.to_dict(), {})),
        ("params/policy", _encode_payload({}, dict(ck.policy))),
        ("params/model", _encode_payload({}, dict(ck.model))),
        ("params/barrier", _encode_payload({}, dict(ck.barrier))),
    ]
    for name, st in ck.adam.items():
        sections.append((f"adam/{name}", _encode_payload(*_adam_section(st))))
    sections.append(("rng", _encode_payload(ck.rng_state, {})))
    lengths = [len(s) for s in ck.replay_states]
    replay = {}
    if ck.replay_states:
        replay = {"states": np.concatenate(ck.replay_states),
                  "actions": np.concatenate(ck.replay_actions)}
    sections.append(("replay", _encode_payload({"lengths": lengths}, replay)))
    sections.append(("metrics", _encode_payload(ck.metrics, {})))

    out = [MAGIC, struct.pack("<II", ck.version, len(sections))]
    for name, payload in sections:
        nb = name.encode()
        out += [struct.pack("<H", len(nb)), nb,
                struct.pack("<QI", len(payload), zlib.crc32(payload)), payload]
    return b"".join(out)


# --------------------------------------------------------------------------- decoding


class _Reader:
    def __init__(self, buf: bytes, base: int = 0):
        self.buf = buf
        self.pos = 0
        self.base = base

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what}", self.base + self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_payload(payload: bytes, base: int) -> tuple[Any, dict[str, np.ndarray]]:
    r = _Reader(payload, base)
    (hlen,) = r.unpack("<I", "header length")
    at = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("malformed section header", base + at) from None
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "array name length")
        name = r.take(nlen, "array name").decode()
        (ndim,) = r.unpack("<B", "array rank")
        shape = r.unpack(f"<{ndim}Q", "array shape")
        size = int(np.prod(shape)) if ndim else 1
        data = r.take(8 * size, f"array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in section", base + r.pos)
    return header, arrays


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}", 4)
    (count,) = r.unpack("<I", "section count")
    sections = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "section name length")
        name = r.take(nlen, "section name").decode(errors="replace")
        plen, crc = r.unpack("<QI", "section length")
        start = r.pos
        payload = r.take(plen, f"section {name!r}")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in section {name!r}", start)
        sections[name] = _decode_payload(payload, start)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last section", r.pos)
    for required in ("meta", "config", "params/policy", "params/model", "params/barrier", "rng",
                     "replay", "metrics"):
        if required not in sections:
            raise CheckpointError(f"missing section {required!r}", len(buf))

    adam = {}
    for name, (h, arrays) in sections.items():
        if name.startswith("adam/"):
            adam[name[5:]] = AdamState(h["lr"], {k: arrays[f"m/{k}"] for k in h["names"]},
                                       {k: arrays[f"v/{k}"] for k in h["names"]},
                                       h["step"], h["beta1"], h["beta2"], h["eps"])
    lengths = sections["replay"][0]["lengths"]
    rs, ra = [], []
    if lengths:
        bounds = np.cumsum(lengths)[:-1]
        rs = list(np.split(sections["replay"][1]["states"], bounds))
        ra = list(np.split(sections["replay"][1]["actions"], bounds))
    return Checkpoint(
        config=TrainConfig.from_dict(sections["config"][0]),
        policy=ParamSet(sections["params/policy"][1]),
        model=ParamSet(sections["params/model"][1]),
        barrier=ParamSet(sections["params/barrier"][1]),
        adam=adam, iteration=sections["meta"][0]["iteration"],
        rng_state=sections["rng"][0], replay_states=rs, replay_actions=ra,
        metrics=sections["metrics"][0], version=version)


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
