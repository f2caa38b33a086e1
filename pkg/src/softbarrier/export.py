"""Plot-ready exports of a finished run: loss curves, paired trajectories, barrier series."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import make_stream
from .envs import Trajectory, contains, run_episodes
from .orchestrator import from_checkpoint
from .sdegen import replay

FORMATS = ("csv", "json")

_SERIES = {"type": "array", "items": {"type": "number"}}
_MATRIX = {"type": "array", "items": _SERIES}
_ROLLOUT = {
    "type": "object",
    "required": ["states", "actions", "rewards", "barrier", "unsafe"],
    "properties": {"states": _MATRIX, "actions": _MATRIX, "rewards": _SERIES, "barrier": _SERIES,
                   "unsafe": {"type": "array", "items": {"type": "boolean"}}},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["env", "iterations", "metrics", "pairs", "certificate", "evaluation"],
    "properties": {
        "env": {"type": "string"},
        "iterations": {"type": "integer", "minimum": 0},
        "metrics": {"type": "object", "additionalProperties": _SERIES},
        "pairs": {
            "type": "array",
            "items": {"type": "object", "required": ["pair", "real", "synthetic"],
                      "properties": {"pair": {"type": "integer"}, "real": _ROLLOUT,
                                     "synthetic": _ROLLOUT}},
        },
        "certificate": {"type": ["object", "null"]},
        "evaluation": {"type": ["object", "null"]},
    },
}


def _rollout_dict(tr: Trajectory, barrier_values: np.ndarray, unsafe: np.ndarray) -> dict:
    return {"states": tr.states.tolist(), "actions": tr.actions.tolist(),
            "rewards": tr.rewards.tolist(), "barrier": barrier_values.tolist(),
            "unsafe": [bool(u) for u in unsafe]}


def build_export(run_dir: str | Path, n_pairs: int = 5) -> dict:
    """Collect everything the plots need from ``run_dir`` into one document.

    Each pair is a real episode and the model rollout driven by the same
    initial state and noise, with the final barrier evaluated along both.
    """
    run = Path(run_dir)
    ck = load_checkpoint(run / "final.ckpt")
    st = from_checkpoint(ck)
    env = st.env
    real = run_episodes(env, st.policy, make_stream(ck.config.seed, "eval"), n_pairs)
    pairs = []
    for i, tr in enumerate(real):
        syn = replay(st.model, st.policy, tr.states[0], tr.noise)
        syn_tr = Trajectory(syn.states, syn.actions, env.reward(syn.states, syn.actions))
        pairs.append({
            "pair": i,
            "real": _rollout_dict(tr, st.barrier(tr.states), contains(env.unsafe_region, tr.states)),
            "synthetic": _rollout_dict(syn_tr, st.barrier(syn.states),
                                       contains(env.unsafe_region, syn.states)),
        })
    doc = {"env": env.name, "iterations": ck.iteration, "metrics": ck.metrics, "pairs": pairs,
           "certificate": None, "evaluation": None}
    for key, name in (("certificate", "certificate.json"), ("evaluation", "evaluation.json")):
        if (run / name).exists():
            doc[key] = json.loads((run / name).read_text(encoding="utf-8"))
    return doc


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v) -> str:
    # repr is locale independent and round-trips
    return repr(float(v))


def write_csv(doc: dict, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    (out / "metrics").mkdir(exist_ok=True)
    for name, series in doc["metrics"].items():
        path = out / "metrics" / f"{name}.csv"
        _write_rows(path, ["iteration", name], ([i, _num(v)] for i, v in enumerate(series)))
        written.append(path)

    first = doc["pairs"][0]["real"] if doc["pairs"] else None
    n = len(first["states"][0]) if first else 0
    m = len(first["actions"][0]) if first else 0
    header = (["pair", "source", "t"] + [f"s{k}" for k in range(n)] + [f"a{j}" for j in range(m)]
              + ["reward", "barrier", "unsafe"])
    rows = []
    for p in doc["pairs"]:
        for source in ("real", "synthetic"):
            r = p[source]
            for t, (s, a) in enumerate(zip(r["states"], r["actions"])):
                rows.append([p["pair"], source, t] + [_num(v) for v in s] + [_num(v) for v in a]
                            + [_num(r["rewards"][t]), _num(r["barrier"][t]), int(r["unsafe"][t])])
    path = out / "trajectories.csv"
    _write_rows(path, header, rows)
    written.append(path)

    rows = [[p["pair"], t, _num(br), _num(bs)]
            for p in doc["pairs"]
            for t, (br, bs) in enumerate(zip(p["real"]["barrier"], p["synthetic"]["barrier"]))]
    path = out / "barrier.csv"
    _write_rows(path, ["pair", "t", "real", "synthetic"], rows)
    written.append(path)
    return written


def write_json(doc: dict, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "export.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return [path]


def export_run(run_dir: str | Path, fmt: str, out_dir: str | Path | None = None,
               n_pairs: int = 5) -> list[Path]:
    if fmt not in FORMATS:
        raise ValueError(f"unknown export format {fmt!r}; expected one of {', '.join(FORMATS)}")
    doc = build_export(run_dir, n_pairs)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "export"
    return write_csv(doc, out) if fmt == "csv" else write_json(doc, out)
