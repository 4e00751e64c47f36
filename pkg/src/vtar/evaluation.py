"""Held-out evaluation, confusion-matrix metrics, class merging and prompt ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, ManifestEntry, SamplerConfig, clip_rng, preprocess_eval, sample_frames
from .errors import DataError, DomainError, SpecError
from .model import VideoTextModel

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    labels: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels)
        if self.counts.shape != (k, k):
            raise ValueError(f"confusion counts {self.counts.shape} do not match {k} labels")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_pairs(cls, truth: Sequence[int], pred: Sequence[int], labels: Sequence[str]) -> "ConfusionMatrix":
        k = len(labels)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts, list(labels))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def to_text(self) -> str:
        """Aligned table; rows are true labels, columns predicted labels."""
        width = max(len(lab) for lab in self.labels)
        cell = max(width, len(str(self.counts.max(initial=0))))
        head = " " * width + " | " + " ".join(f"{lab:>{cell}}" for lab in self.labels)
        lines = [head, "-" * len(head)]
        for lab, row in zip(self.labels, self.counts):
            lines.append(f"{lab:>{width}} | " + " ".join(f"{int(v):>{cell}}" for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class Metrics:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision_macro": self.precision_macro,
                "recall_macro": self.recall_macro, "f1_macro": self.f1_macro,
                "averaging": "macro", "per_class": self.per_class}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy plus per-class and macro-averaged precision, recall and F1.

    Empty rows or columns give 0 rather than NaN, and such classes still
    count in the macro means.
    """
    total = cm.total
    if total < 1:
        raise DomainError("metrics need at least one evaluated clip")
    counts = cm.counts
    diag = np.diag(counts).astype(float)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    per_class = {}
    ps, rs, fs = [], [], []
    for i, lab in enumerate(cm.labels):
        p = _ratio(diag[i], col[i])
        r = _ratio(diag[i], row[i])
        f = _ratio(2 * p * r, p + r)
        per_class[lab] = {"precision": p, "recall": r, "f1": f, "support": int(row[i])}
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return Metrics(accuracy=float(diag.sum()) / total, precision_macro=float(np.mean(ps)),
                   recall_macro=float(np.mean(rs)), f1_macro=float(np.mean(fs)), per_class=per_class)


# -- class merging ---------------------------------------------------------------------------

@dataclass
class MergeSpec:
    groups: dict[str, list[str]]  # merged label -> original labels

    def __post_init__(self):
        seen = set()
        for new, members in self.groups.items():
            if not members:
                raise SpecError(f"merge group {new!r} is empty")
            for lab in members:
                if lab in seen:
                    raise SpecError(f"label {lab!r} appears in more than one merge group")
                seen.add(lab)

    @classmethod
    def with_singletons(cls, groups: dict[str, list[str]], labels: Sequence[str]) -> "MergeSpec":
        """Complete ``groups`` with a singleton group for every label it leaves out."""
        covered = {lab for members in groups.values() for lab in members}
        full = {lab: [lab] for lab in labels if lab not in covered}
        full.update(groups)
        return cls(full)

    @classmethod
    def identity(cls, labels: Sequence[str]) -> "MergeSpec":
        return cls({lab: [lab] for lab in labels})


def merge_classes(cm: ConfusionMatrix, spec: MergeSpec) -> ConfusionMatrix:
    """Sum rows and columns within each group; groups keep the order of their first member."""
    index = {lab: i for i, lab in enumerate(cm.labels)}
    for members in spec.groups.values():
        for lab in members:
            if lab not in index:
                raise SpecError(f"merge spec names unknown label {lab!r}")
    covered = {lab for members in spec.groups.values() for lab in members}
    missing = [lab for lab in cm.labels if lab not in covered]
    if missing:
        raise SpecError(f"merge spec does not cover labels {missing}")
    order = sorted(spec.groups.items(), key=lambda kv: min(index[lab] for lab in kv[1]))
    assign = np.zeros((len(cm.labels), len(order)), dtype=np.int64)
    for g, (_, members) in enumerate(order):
        for lab in members:
            assign[index[lab], g] = 1
    return ConfusionMatrix(assign.T @ cm.counts @ assign, [name for name, _ in order])


# -- splitting ----------------------------------------------------------------------------------

def split_dataset(dataset: Dataset, eval_fraction: float = 0.6, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; each label sends round(fraction * n) clips to the eval side.

    Every label with at least two clips keeps one on each side. A label with a
    single clip goes to the training side with a warning.
    """
    if not 0 < eval_fraction < 1:
        raise ValueError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4099]))
    by_label: dict[str, list[int]] = {}
    for i, e in enumerate(dataset.entries):
        by_label.setdefault(e.label, []).append(i)
    eval_idx = set()
    for label, idx in by_label.items():
        if len(idx) == 1:
            warnings.warn(f"label {label!r} has a single clip; it is kept for training only")
            continue
        n_eval = min(max(int(round(eval_fraction * len(idx))), 1), len(idx) - 1)
        picked = rng.permutation(len(idx))[:n_eval]
        eval_idx.update(idx[j] for j in picked)
    train = [e for i, e in enumerate(dataset.entries) if i not in eval_idx]
    held = [e for i, e in enumerate(dataset.entries) if i in eval_idx]
    return dataset.subset(train), dataset.subset(held)


# -- evaluation ---------------------------------------------------------------------------------

def _targets(entries: Sequence[ManifestEntry], class_labels: Sequence[str]) -> np.ndarray:
    lookup = {lab: i for i, lab in enumerate(class_labels)}
    out = []
    for e in entries:
        if e.label not in lookup:
            raise DataError(f"eval label {e.label!r} is not among the class labels {list(class_labels)}")
        out.append(lookup[e.label])
    return np.asarray(out, dtype=np.int64)


def eval_frames(model: VideoTextModel, dataset: Dataset, sample_seed: int = 0) -> np.ndarray:
    """Deterministic frame samples for every clip, centre-cropped and normalised."""
    cfg = model.cfg
    sampler = SamplerConfig(n_frames=cfg.frames_per_clip)
    out = []
    for i, e in enumerate(dataset.entries):
        frames = sample_frames(dataset.clip(e), (e.start_frame, e.end_frame), sampler, clip_rng(sample_seed, i))
        out.append(preprocess_eval(frames, cfg.frame_side))
    return np.stack(out)


def video_embeddings(model: VideoTextModel, clips: np.ndarray, batch_size: int = 16) -> np.ndarray:
    parts = [model.encode_videos(clips[i:i + batch_size]).data for i in range(0, len(clips), batch_size)]
    return np.concatenate(parts)


def predict(model: VideoTextModel, video_embs: np.ndarray, prompts: Sequence[str]) -> np.ndarray:
    label_embs = model.encode_texts(prompts).data
    logits = video_embs @ label_embs.T
    return np.argmax(logits, axis=1)  # temperature is positive, so it never moves the argmax


def evaluate(model: VideoTextModel, dataset: Dataset, prompts: Sequence[str],
             class_labels: Sequence[str] | None = None, sample_seed: int = 0,
             cache: dict | None = None) -> tuple[ConfusionMatrix, Metrics]:
    """Classify every clip against the prompts; ``class_labels[i]`` is what ``prompts[i]`` names."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate an empty dataset")
    if len(prompts) == 0:
        raise DomainError("evaluation needs at least one prompt")
    class_labels = list(prompts) if class_labels is None else list(class_labels)
    if len(class_labels) != len(prompts):
        raise SpecError(f"{len(prompts)} prompts for {len(class_labels)} class labels")
    truth = _targets(dataset.entries, class_labels)
    if cache is not None and "video" in cache:
        emb = cache["video"]
    else:
        emb = video_embeddings(model, eval_frames(model, dataset, sample_seed))
        if cache is not None:
            cache["video"] = emb
    pred = predict(model, emb, prompts)
    cm = ConfusionMatrix.from_pairs(truth, pred, class_labels)
    return cm, compute_metrics(cm)


# -- prompt ablation ------------------------------------------------------------------------------

@dataclass
class AblationSpec:
    variants: dict[str, list[str]]

    def __post_init__(self):
        if not self.variants:
            raise SpecError("ablation needs at least one variant")
        sizes = {len(v) for v in self.variants.values()}
        if len(sizes) != 1:
            raise SpecError(f"all prompt variants must have the same length, got {sorted(sizes)}")

    @classmethod
    def from_json(cls, obj) -> "AblationSpec":
        """Accepts {"name": [prompts]} or [{"name": ..., "prompts": [...]}]."""
        if isinstance(obj, dict):
            return cls({str(k): list(v) for k, v in obj.items()})
        variants = {}
        for row in obj:
            name = row["name"]
            if name in variants:
                raise SpecError(f"duplicate variant name {name!r}")
            variants[name] = list(row["prompts"])
        return cls(variants)


@dataclass
class AblationRow:
    name: str
    prompts: list[str]
    metrics: Metrics


def ablate_prompts(model: VideoTextModel, dataset: Dataset, spec: AblationSpec,
                   class_labels: Sequence[str], sample_seed: int = 0) -> list[AblationRow]:
    """Evaluate each prompt variant on the same frames and parameters; best accuracy first."""
    k = len(class_labels)
    for name, prompts in spec.variants.items():
        if len(prompts) != k:
            raise SpecError(f"variant {name!r} has {len(prompts)} prompts for {k} classes")
    cache: dict = {}
    rows = []
    for name, prompts in spec.variants.items():
        _, metrics = evaluate(model, dataset, prompts, class_labels, sample_seed, cache)
        rows.append(AblationRow(name, list(prompts), metrics))
    # stable sort keeps input order among ties
    return sorted(rows, key=lambda r: -r.metrics.accuracy)


# -- serialisation ---------------------------------------------------------------------------------

def metrics_csv(metrics: Metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "support"])
    for lab, m in metrics.per_class.items():
        w.writerow([lab, f"{m['precision']:.6f}", f"{m['recall']:.6f}", f"{m['f1']:.6f}", m["support"]])
    w.writerow(["macro", f"{metrics.precision_macro:.6f}", f"{metrics.recall_macro:.6f}",
                f"{metrics.f1_macro:.6f}", sum(m["support"] for m in metrics.per_class.values())])
    return buf.getvalue()


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "accuracy", "precision_macro", "recall_macro", "f1_macro", "prompts"])
    for r in rows:
        m = r.metrics
        w.writerow([r.name, f"{m.accuracy:.6f}", f"{m.precision_macro:.6f}", f"{m.recall_macro:.6f}",
                    f"{m.f1_macro:.6f}", " | ".join(r.prompts)])
    return buf.getvalue()


def ablation_json(rows: Sequence[AblationRow]) -> str:
    return json.dumps([{"variant": r.name, "prompts": r.prompts, **r.metrics.to_dict()} for r in rows],
                      indent=2, sort_keys=True) + "\n"


def evaluation_json(cm: ConfusionMatrix, metrics: Metrics) -> dict:
    out = metrics.to_dict()
    out["labels"] = list(cm.labels)
    out["confusion"] = cm.counts.tolist()
    return out
