"""Command-line entry point: ``mmfuse <subcommand> ...``.

``train`` writes the checkpoint plus two sidecar files next to it,
``<ckpt>.ini`` (the run config) and ``<ckpt>.vocab`` (the vocabulary), which
``eval`` reads back to rebuild the model and the split.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ablation import ablate
from .checkpoint import load_checkpoint
from .config import RunConfig, load_grid, load_run_config, save_run_config
from .data import load_manifest, puzzle_split, synth_puzzles, write_manifest
from .encoders import Vocabulary
from .errors import MMFuseError
from .train import evaluate, train
from .verify import GRAD_TOLERANCE, model_grad_error, op_grad_errors

log = logging.getLogger("mmfuse")


def _sidecars(ckpt: Path) -> tuple[Path, Path]:
    return ckpt.with_name(ckpt.name + ".ini"), ckpt.with_name(ckpt.name + ".vocab")


def cmd_gen_data(args) -> int:
    instances = synth_puzzles(args.seed, args.roots, args.per_root)
    path = write_manifest(instances, args.out)
    print(f"wrote {len(instances)} puzzles to {path}")
    return 0


def _load_split(data_dir, split_seed):
    instances = load_manifest(data_dir, lazy=True)
    return instances, puzzle_split({i.root_id for i in instances}, split_seed)


def cmd_train(args) -> int:
    run = load_run_config(args.config) if args.config else RunConfig()
    instances, split = _load_split(args.data, run.split_seed)
    log.info("split train/val/test roots: %s", split.counts)
    result = train(run.model, run.train, instances, split)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_bytes(result.checkpoint)
    cfg_path, vocab_path = _sidecars(ckpt)
    save_run_config(run, cfg_path)
    result.model.vocab.save(vocab_path)
    for m in result.history:
        print(f"epoch {m.epoch:3d}  train_loss {m.train_loss:.4f}  val_acc {m.val_accuracy:.4f}")
    print(f"best epoch {result.best_epoch}  val_acc {result.best_val_accuracy:.4f}  -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    cfg_path, vocab_path = _sidecars(ckpt)
    for p in (ckpt, cfg_path, vocab_path):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")
    run = load_run_config(cfg_path)
    model = load_checkpoint(ckpt.read_bytes(), run.model, Vocabulary.load(vocab_path))
    instances, split = _load_split(args.data, run.split_seed)
    subset = instances if args.split == "all" else split.select(instances, args.split)
    acc = evaluate(model, subset)
    print(f"{args.split} accuracy {acc:.4f} on {len(subset)} puzzles")
    return 0


def cmd_ablate(args) -> int:
    grid, run = load_grid(args.grid)
    instances, split = _load_split(args.data, run.split_seed)
    report = ablate(grid, run.train, instances, split)
    Path(args.report).write_text(report.to_csv(), encoding="utf-8")
    print(report.to_table())
    return 0


def cmd_gradcheck(args) -> int:
    errors = op_grad_errors()
    if args.full:
        errors["model/classification"] = model_grad_error("classification")
        errors["model/matching"] = model_grad_error("matching")
    failed = 0
    for name, err in errors.items():
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        failed += status == "FAIL"
        print(f"{name:22s} {err:.3e}  {status}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfuse", description="Two-tower multimodal puzzle classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic puzzle manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--roots", type=int, default=8)
    p.add_argument("--per-root", type=int, default=250)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", help="INI file with [model], [train], [data] sections")
    p.add_argument("--data", required=True, help="directory holding manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test every configuration of a grid")
    p.add_argument("--grid", required=True, help="INI file with a [grid] section")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--full", action="store_true", help="also check both full models")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (MMFuseError, FileNotFoundError) as exc:
        print(f"mmfuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
