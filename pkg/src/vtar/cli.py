"""Command-line entry point: ``vtar <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticSpec, load_captions, write_dataset
from .errors import DataError, DomainError, FormatError, NumericError, RangeError, ShapeError, SpecError, WindowError
from .evaluation import (AblationSpec, MergeSpec, ablate_prompts, ablation_csv, ablation_json, compute_metrics,
                         evaluate, evaluation_json, merge_classes, metrics_csv, split_dataset)
from .gradcheck import GRADCHECK_TOL, run_gradcheck
from .model import ModelConfig, VideoTextModel, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, run_pipeline
from .presets import generic_spec, task_spec
from .training import TrainConfig, finetune, pretrain

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

log = logging.getLogger("vtar")


class UsageError(Exception):
    pass


CONFIG_ERRORS = (UsageError, SpecError, DataError, FormatError, ShapeError, DomainError, RangeError,
                 WindowError, ValueError, KeyError, TypeError, FileNotFoundError, NotADirectoryError)


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def env_seed(default: int) -> int:
    raw = os.environ.get("VTAR_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"VTAR_SEED must be an integer, got {raw!r}")


def _out_parent(path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise UsageError(f"output directory {path.parent} does not exist")
    return path


def _dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.jsonl").is_file():
        raise UsageError(f"no manifest.jsonl under {root}")
    return Dataset.load(root)


def _select_split(ds: Dataset, args) -> Dataset:
    if args.split == "all":
        return ds
    train, held = split_dataset(ds, args.eval_fraction, env_seed(args.split_seed))
    return held if args.split == "eval" else train


# -- commands ---------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.preset:
        spec = {"generic": generic_spec, "task": task_spec}[args.preset](env_seed(0))
    else:
        d = _read_json(args.spec, "spec")
        if not isinstance(d, dict):
            raise UsageError("spec JSON must be an object")
        d["seed"] = env_seed(d.get("seed", 0))
        spec = SyntheticSpec.from_dict(d)
    out = _out_parent(args.out)
    out.mkdir(exist_ok=True)
    ds = write_dataset(spec, out)
    counts = {lab: sum(e.label == lab for e in ds.entries) for lab in ds.labels}
    print(f"wrote {len(ds)} clips in {len(counts)} classes to {out}")
    for lab, n in counts.items():
        print(f"  {lab}: {n}")
    return EXIT_OK


def _train_configs(args, mode: str) -> tuple[ModelConfig, TrainConfig, dict]:
    cfg = _read_json(args.config, "config") if args.config else {}
    if not isinstance(cfg, dict):
        raise UsageError("config JSON must be an object")
    unknown = set(cfg) - {"model", "train", "seed", "prompts", "class_labels"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    seed = env_seed(int(cfg.get("seed", 0)))
    train = dict(cfg.get("train", {}))
    if getattr(args, "preset", None) == "paper":
        train = TrainConfig.paper_preset(seed, **{k: v for k, v in train.items()
                                                   if k not in ("learning_rate", "epochs", "batch_size")}).to_dict()
    train.update(mode=mode, seed=seed)
    model_cfg = ModelConfig.from_dict({**cfg.get("model", {}), "seed": seed})
    return model_cfg, TrainConfig(**train), cfg


def _finish_training(model: VideoTextModel, train_log, args) -> int:
    checksum = save_checkpoint(model, args.out, {"train": train_log.config})
    train_log.checksum = checksum
    Path(str(args.out) + ".log.json").write_text(train_log.to_json())
    print(f"saved {args.out} (sha256 {checksum[:16]}...), final loss {train_log.epoch_losses[-1]:.4f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg, _ = _train_configs(args, "pretrain")
    ds = _dataset(args.data)
    _out_parent(args.out)
    if args.init:
        model, _ = load_checkpoint(args.init)
    else:
        model = VideoTextModel(model_cfg)
    model, train_log = pretrain(model, ds, train_cfg, load_captions(args.data))
    return _finish_training(model, train_log, args)


def cmd_finetune(args) -> int:
    if not args.init:
        raise UsageError("finetune requires --init <checkpoint>")
    _, train_cfg, cfg = _train_configs(args, "finetune")
    ds = _select_split(_dataset(args.data), args)
    _out_parent(args.out)
    model, _ = load_checkpoint(args.init)
    prompts = cfg.get("prompts") or ds.labels
    model, train_log = finetune(model, ds, prompts, train_cfg, cfg.get("class_labels"))
    return _finish_training(model, train_log, args)


def _prompts(path) -> tuple[list[str], list[str]]:
    """Prompt file: a list of strings, or {"prompts": [...], "labels": [...]}."""
    d = _read_json(path, "prompts")
    if isinstance(d, list):
        return list(d), list(d)
    if isinstance(d, dict) and "prompts" in d:
        prompts = list(d["prompts"])
        return prompts, list(d.get("labels", prompts))
    raise UsageError("prompts JSON must be a list or an object with a 'prompts' list")


def cmd_eval(args) -> int:
    prompts, labels = _prompts(args.prompts)
    merge = None
    if args.merge:
        groups = _read_json(args.merge, "merge")
        if not isinstance(groups, dict):
            raise UsageError("merge JSON must map merged label -> list of labels")
        merge = MergeSpec.with_singletons(groups, labels)
    out = _out_parent(args.out)
    model, _ = load_checkpoint(args.ckpt)
    ds = _select_split(_dataset(args.data), args)
    cm, metrics = evaluate(model, ds, prompts, labels, sample_seed=args.sample_seed)
    result = evaluation_json(cm, metrics)
    table = cm.to_text()
    if merge is not None:
        mcm = merge_classes(cm, merge)
        result["merged"] = evaluation_json(mcm, compute_metrics(mcm))
        table += "\nmerged\n" + mcm.to_text()
    _write_json(out, result)
    out.with_suffix(".csv").write_text(metrics_csv(metrics))
    out.with_suffix(".confusion.txt").write_text(table)
    print(table, end="")
    line = f"accuracy {metrics.accuracy:.4f}  precision {metrics.precision_macro:.4f}  " \
           f"recall {metrics.recall_macro:.4f}  f1 {metrics.f1_macro:.4f} (macro)"
    if merge is not None:
        line += f"  merged accuracy {result['merged']['accuracy']:.4f}"
    print(line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = AblationSpec.from_json(_read_json(args.variants, "variants"))
    labels = list(_read_json(args.labels, "labels")) if args.labels else next(iter(spec.variants.values()))
    out = _out_parent(args.out)
    model, _ = load_checkpoint(args.ckpt)
    ds = _select_split(_dataset(args.data), args)
    rows = ablate_prompts(model, ds, spec, labels, sample_seed=args.sample_seed)
    out.with_suffix(".csv").write_text(ablation_csv(rows))
    out.with_suffix(".json").write_text(ablation_json(rows))
    width = max(len(r.name) for r in rows)
    for r in rows:
        print(f"{r.name:<{width}}  accuracy {r.metrics.accuracy:.4f}  f1 {r.metrics.f1_macro:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.dim < 2 or args.dim % 2 or args.layers < 1:
        raise UsageError("--dim must be an even integer >= 2 and --layers >= 1")
    start = time.perf_counter()
    errors = run_gradcheck(args.dim, args.layers, env_seed(args.seed), args.eps)
    ok = True
    for loss, per_param in errors.items():
        worst = max(per_param.values())
        ok &= worst < GRADCHECK_TOL
        print(f"{loss}: max relative error {worst:.3e}")
        for name, err in per_param.items():
            flag = "" if err < GRADCHECK_TOL else "  FAIL"
            print(f"  {name:<40} {err:.3e}{flag}")
    print(f"{'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOL:g}, {time.perf_counter() - start:.1f}s)")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_reproduce(args) -> int:
    d = _read_json(args.config, "config") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    d["seed"] = env_seed(int(d.get("seed", 0)))
    if args.pretrain_epochs is not None:
        d.setdefault("pretrain", {})["epochs"] = args.pretrain_epochs
    cfg = PipelineConfig.from_dict(d)
    cfg.validate()
    out = Path(args.out)
    if not out.parent.is_dir():
        raise UsageError(f"output directory {out.parent} does not exist")
    result = run_pipeline(out, cfg)
    print((out / "report.txt").read_text(), end="")
    t = result.timings
    print(f"\npretrain {t['pretrain_seconds']:.1f}s, finetune {t['finetune_seconds']:.1f}s; reports in {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _add_split(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--split", choices=["all", "train", "eval"], default=default,
                   help="which part of a stratified split to use")
    p.add_argument("--eval-fraction", type=float, default=0.6)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic clip corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="SyntheticSpec JSON")
    src.add_argument("--preset", choices=["generic", "task"], help="built-in corpus")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a model")
        p.add_argument("--config", help="JSON with optional 'model', 'train', 'seed', 'prompts' sections")
        p.add_argument("--data", required=True)
        p.add_argument("--init", help="starting checkpoint")
        p.add_argument("--out", required=True)
        if name == "finetune":
            p.add_argument("--preset", choices=["paper"], help="learning rate 1e-6, 5 epochs, batch 8")
            _add_split(p, "train")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint against label prompts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--merge", help="JSON mapping merged label -> original labels")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-seed", type=int, default=0)
    _add_split(p, "eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare label-prompt variants")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", required=True)
    p.add_argument("--labels", help="JSON list of dataset labels, in prompt order (default: first variant)")
    p.add_argument("--out", required=True, help="output prefix; writes .csv and .json")
    p.add_argument("--sample-seed", type=int, default=0)
    _add_split(p, "eval")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of both losses")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reproduce-paper-shape", help="run the whole pipeline and write reports")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="PipelineConfig JSON overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
