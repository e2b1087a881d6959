"""``vmmt`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import kernels
from .checkpoint import Checkpoint, CheckpointError
from .data import DataError, default_lexicon, load_features, read_lines, save_features, synth_splits, write_lines
from .gradcheck import check_model
from .model import VARIANTS
from .nn import ConfigError
from .train import TrainConfig, backtranslate, evaluate, report_json, run_config, translate_lines

log = logging.getLogger("vmmt")

SYNTH_WORDS = 40


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("expected an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    result = run_config(cfg, args.variant, args.out)
    print(json.dumps({"stop_reason": result.stop_reason, "epochs": len(result.history),
                      "best_val_bleu": result.best_bleu,
                      "checkpoint": str(Path(args.out) / "best.vmck")}))
    return 0 if result.stop_reason != "non_finite" else 3


def cmd_translate(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    lines = read_lines(args.src)
    out = translate_lines(ckpt.model(), ckpt.src_codec, ckpt.tgt_codec, lines, args.mode,
                          args.beam_size, args.z, args.seed)
    sys.stdout.write("".join(line + "\n" for line in out))
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    feats = load_features(args.features) if args.features else None
    report = evaluate(ckpt, read_lines(args.src), read_lines(args.ref), feats)
    sys.stdout.write(report_json(report))
    return 0


def cmd_backtranslate(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    mono = read_lines(args.mono)
    synthetic = backtranslate(ckpt, mono)
    write_lines(f"{args.out}.src", synthetic)
    write_lines(f"{args.out}.tgt", mono)
    if args.features:
        feats = load_features(args.features)
        if len(feats) != len(mono):
            raise DataError(f"{len(feats)} feature rows vs {len(mono)} monolingual lines")
        save_features(f"{args.out}.fvec", feats)
    print(json.dumps({"lines": len(mono), "src": f"{args.out}.src", "tgt": f"{args.out}.tgt"}))
    return 0


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src_vocab, lexicon = default_lexicon(SYNTH_WORDS, args.seed)
    n_eval = max(1, args.pairs // 10)
    splits = {"train": args.pairs, "valid": n_eval, "test": n_eval}
    tasks = synth_splits(args.seed, list(splits.values()), src_vocab, lexicon,
                         args.feature_dim, args.noise)
    for name, task in zip(splits, tasks):
        write_lines(out / f"{name}.src", task.src_text)
        write_lines(out / f"{name}.tgt", task.tgt_text)
        save_features(out / f"{name}.fvec", task.features)
    config = TrainConfig(
        model={"embed_dim": 64, "hidden_dim": 64, "latent_dim": 8,
               "image_dim": args.feature_dim, "dropout": 0.1, "obs_scale": 0.3},
        bpe_merges=None, seed=args.seed, max_epochs=40, patience=40,
        train_src=str(out / "train.src"), train_tgt=str(out / "train.tgt"),
        train_features=str(out / "train.fvec"),
        valid_src=str(out / "valid.src"), valid_tgt=str(out / "valid.tgt"),
        valid_features=str(out / "valid.fvec"))
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    print(json.dumps({"out": str(out), **splits}))
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    report = check_model(args.variant, tolerance=args.tol)
    print(f"{args.variant}: {report} [{time.perf_counter() - t0:.1f}s, kernels={kernels.BACKEND}]")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmmt", description="Latent-variable multimodal translation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="translate source lines to stdout")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    s.add_argument("--beam-size", type=_positive, default=5)
    s.add_argument("--z", choices=("mean", "sample"), default="mean")
    s.add_argument("--seed", type=_u64, default=0)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="BLEU4/chrF3 report as JSON")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--features")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("backtranslate", help="synthetic sources for monolingual targets")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mono", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--features", help="FVEC rows aligned with --mono, copied to <prefix>.fvec")
    s.set_defaults(func=cmd_backtranslate)

    s = sub.add_parser("synth-data", help="write the synthetic grounded task")
    s.add_argument("--seed", type=_u64, required=True)
    s.add_argument("--pairs", type=_positive, required=True)
    s.add_argument("--feature-dim", type=int, required=True)
    s.add_argument("--noise", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    s.add_argument("--variant", required=True, choices=VARIANTS)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"vmmt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
