"""End-to-end desk-scale experiment: generic pre-training, zero-shot, fine-tuning, merging, ablation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Dataset, load_captions, write_dataset
from .evaluation import (AblationSpec, MergeSpec, ablate_prompts, ablation_csv, compute_metrics, evaluate,
                         evaluation_json, merge_classes, split_dataset)
from .model import ModelConfig, VideoTextModel, save_checkpoint
from .presets import PROMPT_VARIANTS, PUSH_PULL_MERGE, TASK_LABELS, generic_spec, task_spec
from .training import TrainConfig, finetune, pretrain

logger = logging.getLogger(__name__)


def _experiment_model() -> dict:
    # init_std 0.1: at 0.02 the video tower sits on a collapsed plateau for most of the budget
    return {"embed_dim": 32, "init_std": 0.1}


@dataclass
class PipelineConfig:
    seed: int = 0
    generic_clips_per_class: int = 16
    task_clips_per_class: int = 20
    eval_fraction: float = 0.6
    sample_seed: int = 0
    model: dict = field(default_factory=_experiment_model)
    pretrain: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "epochs": 200, "batch_size": 8})
    finetune: dict = field(default_factory=lambda: {"learning_rate": 1e-3, "epochs": 5, "batch_size": 8})

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys {sorted(unknown)}")
        base = cls()
        merged = {k: getattr(base, k) for k in cls.__dataclass_fields__}
        for k, v in d.items():
            merged[k] = {**merged[k], **v} if isinstance(merged[k], dict) else v
        return cls(**merged)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "seed": self.seed})

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(**{**self.pretrain, "mode": "pretrain", "seed": self.seed})

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(**{**self.finetune, "mode": "finetune", "seed": self.seed})

    def validate(self) -> None:
        self.model_config()
        self.pretrain_config()
        self.finetune_config()
        generic_spec(self.seed, self.generic_clips_per_class)
        task_spec(self.seed, self.task_clips_per_class)
        if not 0 < self.eval_fraction < 1:
            raise ValueError(f"eval_fraction must lie in (0, 1), got {self.eval_fraction}")


@dataclass
class PipelineResult:
    report: dict
    timings: dict
    pretrained: VideoTextModel
    finetuned: VideoTextModel


def _row(name: str, metrics) -> dict:
    return {"model": name, "accuracy": metrics.accuracy, "precision_macro": metrics.precision_macro,
            "recall_macro": metrics.recall_macro, "f1_macro": metrics.f1_macro}


def run_pipeline(out_dir, cfg: PipelineConfig) -> PipelineResult:
    """Run every stage, writing data, checkpoints and reports under ``out_dir``.

    ``report.json`` and ``report.txt`` hold only seed-determined content;
    wall-clock times go to ``timings.json``.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    write_dataset(generic_spec(cfg.seed, cfg.generic_clips_per_class), out / "generic")
    write_dataset(task_spec(cfg.seed, cfg.task_clips_per_class), out / "task")
    generic, task = Dataset.load(out / "generic"), Dataset.load(out / "task")
    captions = load_captions(out / "generic")
    train_set, eval_set = split_dataset(task, cfg.eval_fraction, cfg.seed)

    start = time.perf_counter()
    model, pre_log = pretrain(VideoTextModel(cfg.model_config()), generic, cfg.pretrain_config(), captions)
    timings["pretrain_seconds"] = time.perf_counter() - start
    save_checkpoint(model, out / "pretrained.vtar", {"train": pre_log.config})

    zs_cm, zs = evaluate(model, eval_set, TASK_LABELS, sample_seed=cfg.sample_seed)

    start = time.perf_counter()
    tuned, ft_log = finetune(model.clone(), train_set, TASK_LABELS, cfg.finetune_config())
    timings["finetune_seconds"] = time.perf_counter() - start
    save_checkpoint(tuned, out / "finetuned.vtar", {"train": ft_log.config})

    ft_cm, ft = evaluate(tuned, eval_set, TASK_LABELS, sample_seed=cfg.sample_seed)
    merge = MergeSpec.with_singletons(PUSH_PULL_MERGE, TASK_LABELS)
    zs_merged_cm, ft_merged_cm = merge_classes(zs_cm, merge), merge_classes(ft_cm, merge)
    zs_merged, ft_merged = compute_metrics(zs_merged_cm), compute_metrics(ft_merged_cm)

    ablation = ablate_prompts(tuned, eval_set, AblationSpec(PROMPT_VARIANTS), TASK_LABELS, cfg.sample_seed)

    report = {
        "config": asdict(cfg),
        "corpus": {"generic_clips": len(generic), "task_train_clips": len(train_set),
                   "task_eval_clips": len(eval_set)},
        "checksums": {"pretrained": pre_log.checksum, "finetuned": ft_log.checksum},
        "losses": {"pretrain": pre_log.epoch_losses, "finetune": ft_log.epoch_losses},
        "metrics_table": [_row("zero-shot", zs), _row("fine-tuned", ft),
                          _row("zero-shot, merged", zs_merged), _row("fine-tuned, merged", ft_merged)],
        "evaluations": {"zero_shot": evaluation_json(zs_cm, zs), "fine_tuned": evaluation_json(ft_cm, ft),
                        "zero_shot_merged": evaluation_json(zs_merged_cm, zs_merged),
                        "fine_tuned_merged": evaluation_json(ft_merged_cm, ft_merged)},
        "ablation": [{"variant": r.name, "prompts": r.prompts, "accuracy": r.metrics.accuracy,
                      "precision_macro": r.metrics.precision_macro, "recall_macro": r.metrics.recall_macro,
                      "f1_macro": r.metrics.f1_macro} for r in ablation],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(report, zs_cm, ft_cm))
    (out / "ablation.csv").write_text(ablation_csv(ablation))
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return PipelineResult(report, timings, model, tuned)


def format_report(report: dict, zs_cm, ft_cm) -> str:
    lines = ["Task classification before and after fine-tuning (macro averages)", ""]
    lines.append(f"{'model':<20} {'accuracy':>9} {'precision':>10} {'recall':>8} {'f1':>8}")
    for r in report["metrics_table"]:
        lines.append(f"{r['model']:<20} {r['accuracy']:>9.3f} {r['precision_macro']:>10.3f} "
                     f"{r['recall_macro']:>8.3f} {r['f1_macro']:>8.3f}")
    lines += ["", "Zero-shot confusion (rows true, columns predicted)", zs_cm.to_text().rstrip()]
    lines += ["", "Fine-tuned confusion", ft_cm.to_text().rstrip()]
    lines += ["", "Fine-tuned accuracy by label wording", ""]
    width = max(len(r["variant"]) for r in report["ablation"])
    for r in report["ablation"]:
        lines.append(f"{r['variant']:<{width}}  {r['accuracy']:.3f}  {' | '.join(r['prompts'])}")
    return "\n".join(lines) + "\n"
