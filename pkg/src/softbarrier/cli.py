"""``softbarrier`` command line: train, evaluate, certify, export.

Exit codes: 0 success, 2 input error, 3 numeric abort, 4 certification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, bundled_config, load_config
from .export import FORMATS, export_run
from .orchestrator import TrainingAborted, evaluate_policy, practical_bound, run_training

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_CERT = 4

log = logging.getLogger("softbarrier")


class InputError(Exception):
    pass


def _load_ckpt(path: str):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p)
    except CheckpointError as exc:
        raise InputError(f"cannot read checkpoint {p}: {exc}") from None


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file() and bundled_config(args.config) is not None:
        path = bundled_config(args.config)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        config = load_config(path)
    except ConfigError as exc:
        raise InputError(f"invalid config {path}: {exc}") from None
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    resume = _load_ckpt(args.resume) if args.resume else None

    def progress(it: int, row: dict) -> None:
        if it % 25 == 0 or it == config.outer_iters:
            log.info("iter %d  nll %.4g  barrier %.4g  return %.4g  gap %.4g", it,
                     row["gen_nll"], row["barrier_loss"], row["return_hat"], row["model_gap"])

    try:
        ck, report = run_training(config, out_dir=args.out, resume=resume, on_iteration=progress)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint kept in {args.out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {report.iterations} iterations; outputs in {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.episodes < 1:
        raise InputError("--episodes must be >= 1")
    ck = _load_ckpt(args.checkpoint)
    result = evaluate_policy(ck, args.episodes, args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("evaluation.json")
    _write_json(out, result)
    print(json.dumps(result))
    return EXIT_OK


def cmd_certify(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    pairs = ck.config.pairs if args.pairs is None else args.pairs
    steps = ck.config.retrain_steps if args.retrain_steps is None else args.retrain_steps
    if pairs < 1 or steps < 0 or args.mc_samples < 1:
        raise InputError("--pairs and --mc-samples must be >= 1, --retrain-steps >= 0")
    cert, _ = practical_bound(ck, n_pairs=pairs, retrain_steps=steps,
                              delta_scale=args.delta_scale, n_mc=args.mc_samples)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("certificate.json")
    _write_json(out, cert.to_dict())
    print(f"1-eta = {cert.bound:.6f}")
    if not cert.valid:
        print("certificate INVALID: " + ", ".join(cert.reasons), file=sys.stderr)
        return EXIT_CERT
    return EXIT_OK


def cmd_export(args) -> int:
    run = Path(args.run)
    if not (run / "final.ckpt").is_file():
        raise InputError(f"no finished run in {run} (final.ckpt missing)")
    try:
        written = export_run(run, args.format, args.out, n_pairs=args.pairs)
    except CheckpointError as exc:
        raise InputError(str(exc)) from None
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softbarrier", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the joint training loop")
    p.add_argument("--config", required=True,
                   help="TOML run configuration, or a bundled name: 2d, cartpole, smoke")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="empirical safe rate on the real environment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--seed", type=int, help="evaluation seed (default: the run's seed)")
    p.add_argument("--out", help="JSON output path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("certify", help="gap-enlarged practical safety bound")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, help="real/model rollout pairs (default: from the run config)")
    p.add_argument("--retrain-steps", type=int, help="barrier steps (default: from the run config)")
    p.add_argument("--delta-scale", type=float, default=1.0, help="multiply the measured gap")
    p.add_argument("--mc-samples", type=int, default=10_000)
    p.add_argument("--out", help="JSON output path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("export", help="plot data for a finished run")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--out", help="output directory (default: RUN/export)")
    p.add_argument("--pairs", type=int, default=5, help="real/synthetic trajectory pairs")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
