"""Contrastive pre-training and few-shot fine-tuning loops."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, ManifestEntry, SamplerConfig, augment_clip, center_crop, normalize, sample_frames
from .errors import DataError, NumericError
from .model import VideoTextModel
from .optim import Adam

logger = logging.getLogger(__name__)

MODES = ("pretrain", "finetune")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    freeze_text_encoder: bool = False
    mode: str = "finetune"
    augment: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be a finite non-negative number, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        min_batch = 2 if self.mode == "pretrain" else 1
        if self.batch_size < min_batch:
            raise ValueError(f"batch_size must be >= {min_batch} for {self.mode}, got {self.batch_size}")

    @classmethod
    def paper_preset(cls, seed: int = 0, **overrides) -> "TrainConfig":
        """Fine-tuning recipe: learning rate 1e-6, 5 epochs, batch size 8."""
        values = dict(learning_rate=1e-6, epochs=5, batch_size=8, seed=seed, mode="finetune")
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    config: dict
    epoch_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checksum: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))


def clip_frames(dataset: Dataset, entry: ManifestEntry, n_frames: int, side: int,
                rng: np.random.Generator, augment: bool) -> np.ndarray:
    """Sample ``n_frames`` from the entry's window, augment if asked, normalise."""
    clip = dataset.clip(entry)
    frames = sample_frames(clip, (entry.start_frame, entry.end_frame), SamplerConfig(n_frames=n_frames), rng)
    if augment:
        frames = augment_clip(frames, rng, side)
    else:
        frames = center_crop(frames, side)
    return normalize(frames)


def contrastive_batches(entries: Sequence[ManifestEntry], batch_size: int,
                        rng: np.random.Generator) -> list[list[ManifestEntry]]:
    """Shuffle, then fill each batch with rows whose labels are not already in it."""
    queue = [entries[i] for i in rng.permutation(len(entries))]
    batches = []
    while queue:
        batch, seen, rest = [], set(), []
        for e in queue:
            if len(batch) < batch_size and e.label not in seen:
                batch.append(e)
                seen.add(e.label)
            else:
                rest.append(e)
        if len(batch) < 2:
            break
        batches.append(batch)
        queue = rest
    return batches


def plain_batches(entries: Sequence[ManifestEntry], batch_size: int,
                  rng: np.random.Generator) -> list[list[ManifestEntry]]:
    order = [entries[i] for i in rng.permutation(len(entries))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def class_index(labels: Sequence[str], class_labels: Sequence[str]) -> list[int]:
    lookup = {lab: i for i, lab in enumerate(class_labels)}
    out = []
    for lab in labels:
        if lab not in lookup:
            raise DataError(f"label {lab!r} is not among the class prompts {list(class_labels)}")
        out.append(lookup[lab])
    return out


def _check_loss(loss: float, epoch: int, step: int) -> float:
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
    return loss


def train_step(model: VideoTextModel, optimizer: Adam, clips: np.ndarray, cfg: TrainConfig,
               prompts: Sequence[str], targets: Sequence[int] | None = None,
               epoch: int = 0, step: int = 0) -> float:
    """One forward, one backward, one Adam update. Returns the batch loss."""
    optimizer.zero_grad()
    if cfg.mode == "pretrain":
        loss = model.pretrain_contrastive_loss(clips, prompts)
    else:
        loss = model.finetune_classification_loss(clips, targets, prompts)
    value = _check_loss(float(loss.data), epoch, step)
    loss.backward()
    optimizer.step()
    return value


def _optimizer(model: VideoTextModel, cfg: TrainConfig) -> Adam:
    model.set_text_trainable(not cfg.freeze_text_encoder)
    return Adam([p for p in model.params.values() if p.requires_grad], lr=cfg.learning_rate)


def pretrain(model: VideoTextModel, dataset: Dataset, cfg: TrainConfig,
             captions: dict[str, list[str]] | None = None,
             on_epoch: Callable[[int, VideoTextModel], None] | None = None) -> tuple[VideoTextModel, TrainLog]:
    """Symmetric InfoNCE over shuffled batches of distinct-label (clip, caption) pairs.

    ``captions`` optionally maps a label to alternative wordings; each pair
    then uses one wording drawn at random. ``on_epoch(epoch, model)`` is
    called after every epoch.
    """
    if cfg.mode != "pretrain":
        raise ValueError("pretrain needs a TrainConfig with mode='pretrain'")
    if len(dataset.labels) < 2:
        raise DataError("contrastive pre-training needs at least 2 distinct labels")
    captions = captions or {}
    mc = model.cfg
    opt = _optimizer(model, cfg)
    log = TrainLog(config=cfg.to_dict())
    step = 0
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, epoch)
        start, losses = time.perf_counter(), []
        for batch in contrastive_batches(dataset.entries, cfg.batch_size, rng):
            clips = np.stack([clip_frames(dataset, e, mc.frames_per_clip, mc.frame_side, rng, cfg.augment)
                              for e in batch])
            prompts = [_pick_caption(e.label, captions, rng) for e in batch]
            losses.append(train_step(model, opt, clips, cfg, prompts, epoch=epoch, step=step))
            step += 1
        _close_epoch(log, losses, start, epoch)
        if on_epoch is not None:
            on_epoch(epoch, model)
    log.checksum = model.checksum()
    return model, log


def _pick_caption(label: str, captions: dict, rng: np.random.Generator) -> str:
    options = captions.get(label)
    if not options:
        return label
    return options[int(rng.integers(len(options)))]


def finetune(model: VideoTextModel, dataset: Dataset, prompts: Sequence[str], cfg: TrainConfig,
             class_labels: Sequence[str] | None = None,
             on_epoch: Callable[[int, VideoTextModel], None] | None = None) -> tuple[VideoTextModel, TrainLog]:
    """Cross-entropy over the fixed class prompts.

    ``class_labels[i]`` is the dataset label that ``prompts[i]`` describes; it
    defaults to the prompts themselves.
    """
    if cfg.mode != "finetune":
        raise ValueError("finetune needs a TrainConfig with mode='finetune'")
    class_labels = list(prompts) if class_labels is None else list(class_labels)
    if len(class_labels) != len(prompts):
        raise DataError(f"{len(prompts)} prompts for {len(class_labels)} classes")
    class_index([e.label for e in dataset.entries], class_labels)
    mc = model.cfg
    opt = _optimizer(model, cfg)
    log = TrainLog(config=cfg.to_dict())
    step = 0
    for epoch in range(cfg.epochs):
        rng = epoch_rng(cfg.seed, epoch)
        start, losses = time.perf_counter(), []
        for batch in plain_batches(dataset.entries, cfg.batch_size, rng):
            clips = np.stack([clip_frames(dataset, e, mc.frames_per_clip, mc.frame_side, rng, cfg.augment)
                              for e in batch])
            targets = class_index([e.label for e in batch], class_labels)
            losses.append(train_step(model, opt, clips, cfg, prompts, targets, epoch=epoch, step=step))
            step += 1
        _close_epoch(log, losses, start, epoch)
        if on_epoch is not None:
            on_epoch(epoch, model)
    log.checksum = model.checksum()
    return model, log


def _close_epoch(log: TrainLog, losses: list[float], start: float, epoch: int) -> None:
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    log.epoch_losses.append(mean_loss)
    log.epoch_seconds.append(time.perf_counter() - start)
    logger.info("epoch %d: loss %.4f (%d steps, %.1fs)", epoch, mean_loss, len(losses), log.epoch_seconds[-1])
