"""Command-line entry point: synth | train | eval | decode | gradcheck.

Every subcommand writes a JSON manifest with the resolved configuration,
seeds, SHA-256 digests of its inputs, the artifacts it wrote and timings.
Errors go to stderr prefixed with ``error:`` and give exit status 1 (2 for
bad flags, as argparse does).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, load_corpus, load_features, resolve_feature_path
from .gradcheck import run_suite
from .metrics import evaluate_all, write_dump
from .model import ModelConfig, TrainingError, train
from .numerics import NumericError
from .synth import FEATURE_DIR, MEAN_FRAME_FILE, TEST_FILE, TRAIN_FILE, SynthSpec, synth_generate

SEED_ENV = "V2C_SEED"
MANIFEST = "manifest.json"
CHECKPOINT_FILE = "checkpoint.v2c"
LOSS_FILE = "losses.tsv"


class CliError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(flag: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return flag
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _pos_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _pair(text: str) -> tuple[str, str]:
    a, sep, b = text.partition(":")
    if not sep or not a or not b:
        raise argparse.ArgumentTypeError(f"expected ACTION:LOOKALIKE, got {text!r}")
    return a, b


def write_manifest(path, command: str, argv, config: dict, seeds: dict, inputs: list,
                   artifacts: dict, timings: dict, threads: int) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in inputs},
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "timings": timings,
        "threads": threads,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv) -> int:
    t0 = time.perf_counter()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    seed = resolve_seed(args.seed)
    spec = SynthSpec(num_clips=args.clips, hands=args.hands, actions=args.actions, objects=args.objects,
                     d=args.dim, T_range=(args.tmin, args.tmax), noise_sigma=args.noise,
                     confusion=dict(args.confuse))
    try:
        spec.validate()
        spec.action_names()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.split is not None and not 0 < args.split < 1:
        raise CliError(f"--split must be in (0, 1), got {args.split}")
    out.mkdir(parents=True, exist_ok=True)
    ann = synth_generate(spec, seed, out, args.split)
    artifacts = {"annotations": ann, "mean_frame": out / MEAN_FRAME_FILE, "features": out / FEATURE_DIR}
    if args.split is not None:
        artifacts.update(train=out / TRAIN_FILE, test=out / TEST_FILE)
    config = {"num_clips": spec.num_clips, "hands": spec.hands, "actions": spec.actions,
              "objects": spec.objects, "d": spec.d, "T_range": list(spec.T_range),
              "noise_sigma": spec.noise_sigma, "confusion": spec.confusion, "split": args.split}
    write_manifest(out / MANIFEST, "synth", argv, config, {"seed": seed}, [], artifacts,
                   {"total_s": time.perf_counter() - t0}, args.threads)
    print(f"wrote {spec.num_clips} clips to {out}")
    return 0


def _mean_frame_path(args) -> Path | None:
    if args.pad_value is not None:
        return None
    if args.mean_frame is not None:
        return Path(args.mean_frame)
    sibling = Path(args.data).parent / MEAN_FRAME_FILE
    return sibling if sibling.exists() else None


def _corpus_inputs(annotation_path, corpus, mean_path) -> list[Path]:
    inputs = [Path(annotation_path)]
    inputs += [resolve_feature_path(annotation_path, r.feature_path) for r in corpus.records]
    if mean_path is not None:
        inputs.append(mean_path)
    return inputs


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    seed = resolve_seed(args.seed)
    mean_path = _mean_frame_path(args)
    corpus = load_corpus(args.data, mean_path)
    if args.pad_value is not None:
        corpus.mean_frame = np.full(corpus.feature_dim, args.pad_value)
    t_load = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        config = resume.model.config
        if args.epochs < resume.epoch:
            raise CliError(f"--epochs {args.epochs} is below the checkpoint's epoch {resume.epoch}")
        config.epochs = args.epochs
    else:
        config = ModelConfig(hidden=args.hidden, cell=args.cell, joint=not args.ednet, epochs=args.epochs,
                             batch_size=args.batch, lr=args.lr, seed=seed, inference_feeding=args.feeding,
                             cls_loss_kind=args.cls_loss, initial_state=args.initial_state)
    loss_path = out / LOSS_FILE
    with open(loss_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\ttotal\tcls\ttrans\n")

        def log_epoch(rec):
            fh.write(f"{rec.epoch}\t{rec.total!r}\t{rec.cls!r}\t{rec.trans!r}\n")

        result = train(corpus, config, resume=resume, on_epoch=log_epoch)
    t_train = time.perf_counter()
    ckpt_path = out / CHECKPOINT_FILE
    save_checkpoint(result.checkpoint, ckpt_path)
    inputs = _corpus_inputs(args.data, corpus, mean_path)
    if args.resume is not None:
        inputs.append(Path(args.resume))
    cfg = result.checkpoint.model.config.to_dict()
    write_manifest(out / MANIFEST, "train", argv, cfg, {"seed": cfg["seed"]}, inputs,
                   {"checkpoint": ckpt_path, "losses": loss_path},
                   {"load_s": t_load - t0, "train_s": t_train - t_load,
                    "total_s": time.perf_counter() - t0}, args.threads)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.total:.6f} (cls {last.cls:.6f}, trans {last.trans:.6f})")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _manifest_path(args, default_name: str) -> Path:
    if args.manifest is not None:
        return Path(args.manifest)
    return Path(args.checkpoint).parent / default_name


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    if args.feeding is not None:
        model.config.inference_feeding = args.feeding
    mean_path = Path(args.mean_frame) if args.mean_frame is not None else None
    corpus = load_corpus(args.data, mean_path)
    if corpus.feature_dim != model.config.feature_dim:
        raise CliError(f"{args.data}: features have {corpus.feature_dim} dims, "
                       f"checkpoint expects {model.config.feature_dim}")
    report, rows = evaluate_all(model, corpus)
    print(report.format_table())
    artifacts = {}
    if args.dump is not None:
        write_dump(rows, args.dump)
        artifacts["dump"] = args.dump
    inputs = [Path(args.checkpoint)] + _corpus_inputs(args.data, corpus, mean_path)
    cfg = model.config.to_dict()
    cfg["report"] = report.as_dict()
    write_manifest(_manifest_path(args, "eval_manifest.json"), "eval", argv, cfg, {"seed": cfg["seed"]},
                   inputs, artifacts, {"total_s": time.perf_counter() - t0}, args.threads)
    return 0


def cmd_decode(args, argv) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    if args.feeding is not None:
        model.config.inference_feeding = args.feeding
    frames = load_features(args.features, expected_dim=model.config.feature_dim)
    pred = model.infer(frames)
    print(f"{pred.command}\t{pred.action}\t{'true' if pred.truncated else 'false'}")
    cfg = model.config.to_dict()
    write_manifest(_manifest_path(args, "decode_manifest.json"), "decode", argv, cfg,
                   {"seed": cfg["seed"]}, [Path(args.checkpoint), Path(args.features)], {},
                   {"total_s": time.perf_counter() - t0}, args.threads)
    return 0


def cmd_gradcheck(args, argv) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.eps, inject_fault=args.inject_fault)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{r.name}\t{r.error:.3e}\t< {r.threshold:.0e}\t{'ok' if r.passed else 'FAIL'}")
    manifest = Path(args.manifest) if args.manifest is not None else Path("gradcheck_manifest.json")
    from .gradcheck import MICRO_SEED

    config = {"eps": args.eps, "inject_fault": args.inject_fault,
              "results": {r.name: {"error": float(r.error), "threshold": r.threshold} for r in results}}
    write_manifest(manifest, "gradcheck", argv, config, {"micro_seed": MICRO_SEED}, [], {},
                   {"total_s": time.perf_counter() - t0}, args.threads)
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"error: gradient check failed for {names}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v2cnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=_pos_int, default=1,
                        help="cap on BLAS/OpenMP threads (default 1 for determinism)")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=_pos_int, default=64)
    s.add_argument("--hands", type=_pos_int, default=3)
    s.add_argument("--actions", type=_pos_int, default=8)
    s.add_argument("--objects", type=_pos_int, default=6)
    s.add_argument("--dim", type=_pos_int, default=32)
    s.add_argument("--tmin", type=_pos_int, default=24)
    s.add_argument("--tmax", type=_pos_int, default=40)
    s.add_argument("--noise", type=_nonneg_float, default=0.05)
    s.add_argument("--confuse", type=_pair, action="append", default=[], metavar="ACTION:LOOKALIKE",
                   help="look-alike action pair (repeatable)")
    s.add_argument("--split", type=float, default=None, metavar="RATIO",
                   help="also write train.tsv/test.tsv with this training fraction")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--data", required=True, help="annotation TSV")
    t.add_argument("--mean-frame", default=None,
                   help="mean frame file (default: mean_frame.v2cm next to --data if present)")
    t.add_argument("--pad-value", type=float, default=None,
                   help="pad short clips with this constant vector instead of a mean frame")
    t.add_argument("--out", required=True)
    t.add_argument("--cell", choices=("lstm", "gru"), default="lstm")
    t.add_argument("--hidden", type=_pos_int, default=64)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=_pos_int, default=16)
    t.add_argument("--lr", type=_pos_float, default=1e-4)
    t.add_argument("--ednet", action="store_true", help="translation-only baseline")
    t.add_argument("--feeding", choices=("zeros", "autoregressive"), default="zeros")
    t.add_argument("--cls-loss", choices=("sigmoid", "softmax"), default="sigmoid")
    t.add_argument("--initial-state", choices=("zero", "uniform"), default="zero")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="score a checkpoint on a dataset"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mean-frame", default=None, help="only used to validate the dataset")
    e.add_argument("--dump", default=None, help="per-clip TSV output")
    e.add_argument("--feeding", choices=("zeros", "autoregressive"), default=None)
    e.add_argument("--manifest", default=None)
    e.set_defaults(func=cmd_eval)

    d = common(sub.add_parser("decode", help="translate one feature file"))
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--features", required=True)
    d.add_argument("--feeding", choices=("zeros", "autoregressive"), default=None)
    d.add_argument("--manifest", default=None)
    d.set_defaults(func=cmd_decode)

    g = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    g.add_argument("--eps", type=_pos_float, default=1e-6)
    g.add_argument("--inject-fault", action="store_true",
                   help="add an op with a wrong backward pass; the run must fail")
    g.add_argument("--manifest", default=None)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args, argv)
    except (CliError, DataError, CheckpointError, TrainingError, NumericError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
