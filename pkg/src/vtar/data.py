"""Clip files, manifests, frame sampling, augmentation and the synthetic corpus."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError, RangeError, ShapeError, SpecError, WindowError

CLIP_MAGIC = b"VCLP"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sIf4I")  # magic, version, fps, T, H, W, C
EVAL_MEAN = 0.5
EVAL_STD = 0.5


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ShapeError(f"clip frames must be (T>=1, H, W, C), got {self.frames.shape}")
        if self.frames.shape[3] not in (1, 3):
            raise ShapeError(f"clip channel count must be 1 or 3, got {self.frames.shape[3]}")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise ValueError("clip values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- VCLP binary format ----------------------------------------------------------------------

def encode_clip(clip: VideoClip) -> bytes:
    t, h, w, c = clip.frames.shape
    header = _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, clip.fps, t, h, w, c)
    return header + np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()


def decode_clip(data: bytes) -> VideoClip:
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated clip header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, fps, t, h, w, c = _HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise FormatError(f"bad clip magic {magic!r}", 0)
    if version != CLIP_VERSION:
        raise FormatError(f"unsupported clip version {version}", 4)
    need = _HEADER.size + 4 * t * h * w * c
    if len(data) < need:
        raise FormatError(f"truncated clip payload: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after clip payload", need)
    frames = np.frombuffer(data, dtype="<f4", count=t * h * w * c, offset=_HEADER.size)
    return VideoClip(frames.reshape(t, h, w, c).astype(np.float32), float(fps))


def write_clip_file(clip: VideoClip, path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def read_clip_file(path) -> VideoClip:
    return decode_clip(Path(path).read_bytes())


# -- manifest ---------------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    clip_path: str
    label: str
    start_frame: int
    end_frame: int
    split: str | None = None

    def __post_init__(self):
        if not (0 <= self.start_frame < self.end_frame):
            raise RangeError(f"invalid window [{self.start_frame}, {self.end_frame}) for {self.clip_path}")

    def to_json(self) -> str:
        d = asdict(self)
        if d["split"] is None:
            del d["split"]
        return json.dumps(d, sort_keys=True)


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entries.append(ManifestEntry(row["clip_path"], row["label"], int(row["start_frame"]),
                                         int(row["end_frame"]), row.get("split")))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest row ({exc})") from exc
    return entries


class Dataset:
    """Manifest rows resolved against a root directory; clips are loaded once and cached."""

    def __init__(self, root, entries: Sequence[ManifestEntry], clips: dict | None = None):
        self.root = Path(root)
        self.entries = list(entries)
        self._cache: dict[str, VideoClip] = dict(clips or {})

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        return cls(root, read_manifest(root / "manifest.jsonl"))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        """Distinct labels in first-appearance order."""
        return list(dict.fromkeys(e.label for e in self.entries))

    def clip(self, entry: ManifestEntry) -> VideoClip:
        clip = self._cache.get(entry.clip_path)
        if clip is None:
            clip = read_clip_file(self.root / entry.clip_path)
            self._cache[entry.clip_path] = clip
        if entry.end_frame > clip.num_frames:
            raise RangeError(f"window end {entry.end_frame} beyond {clip.num_frames} frames in {entry.clip_path}")
        return clip

    def subset(self, entries: Sequence[ManifestEntry]) -> "Dataset":
        return Dataset(self.root, entries, self._cache)

    def save(self, root=None) -> None:
        root = Path(root or self.root)
        for e in self.entries:
            target = root / e.clip_path
            target.parent.mkdir(parents=True, exist_ok=True)
            write_clip_file(self.clip(e), target)
        write_manifest(self.entries, root / "manifest.jsonl")


# -- frame sampling -------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    n_frames: int = 32
    max_window_seconds: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not self.max_window_seconds > 0:
            raise ValueError("max_window_seconds must be positive")


def sample_indices(start: int, end: int, fps: float, cfg: SamplerConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Sorted frame indices in ``[start, end)``.

    Drawn uniformly without replacement when the window holds at least
    ``n_frames`` frames, with replacement otherwise.
    """
    if end <= start or start < 0:
        raise RangeError(f"empty or negative frame window [{start}, {end})")
    if (end - start) / fps > cfg.max_window_seconds:
        raise WindowError(f"window of {(end - start) / fps:.2f} s exceeds {cfg.max_window_seconds} s")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    size = end - start
    if size >= cfg.n_frames:
        picks = rng.choice(size, size=cfg.n_frames, replace=False)
    else:
        picks = rng.integers(0, size, size=cfg.n_frames)
    return np.sort(picks) + start


def sample_frames(clip: VideoClip, window: tuple[int, int], cfg: SamplerConfig,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    start, end = window
    if end > clip.num_frames:
        raise RangeError(f"window end {end} beyond {clip.num_frames} frames")
    return clip.frames[sample_indices(start, end, clip.fps, cfg, rng)]


# -- preprocessing -------------------------------------------------------------------------------

@dataclass
class AugmentParams:
    top: int
    left: int
    crop: int
    flip: bool
    contrast: np.ndarray
    brightness: np.ndarray


def draw_augment(rng: np.random.Generator, height: int, width: int, channels: int) -> AugmentParams:
    scale = rng.uniform(0.8, 1.0)
    crop = min(height, width, max(1, int(round(math.sqrt(scale * height * width)))))
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    flip = bool(rng.random() < 0.5)
    contrast = rng.uniform(0.8, 1.2, size=channels)
    brightness = rng.uniform(-0.2, 0.2, size=channels)
    return AugmentParams(top, left, crop, flip, contrast, brightness)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the bilinear weights that output pixel i places on the input pixels."""
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m.astype(np.float32)


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Resize the (H, W) axes just before the channel axis to side x side; leading axes are kept."""
    h, w = img.shape[-3:-1]
    if (h, w) == (side, side):
        return img.astype(np.float32)
    img = np.asarray(img, dtype=np.float32)
    rows = _interp_matrix(h, side) @ img.reshape(*img.shape[:-2], -1)  # (..., side, w * c)
    rows = rows.reshape(*img.shape[:-3], side, w, img.shape[-1])
    out = np.swapaxes(rows, -1, -2) @ _interp_matrix(w, side).T  # (..., side, c, side)
    return np.ascontiguousarray(np.swapaxes(out, -1, -2))


def apply_augment(frames: np.ndarray, p: AugmentParams, side: int) -> np.ndarray:
    """Apply one augmentation draw to a frame or a stack of frames."""
    out = resize_bilinear(frames[..., p.top:p.top + p.crop, p.left:p.left + p.crop, :], side)
    if p.flip:
        out = out[..., ::-1, :]
    mean = out.mean(axis=(-3, -2), keepdims=True)
    out = (out - mean) * p.contrast + mean + p.brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_train(frame: np.ndarray, rng: np.random.Generator, side: int) -> np.ndarray:
    """Random resized crop, horizontal flip and colour jitter; output in [0, 1]."""
    h, w, c = frame.shape
    return apply_augment(frame, draw_augment(rng, h, w, c), side)


def augment_clip(frames: np.ndarray, rng: np.random.Generator, side: int) -> np.ndarray:
    """Augment every frame of a clip with one shared draw so motion stays coherent."""
    _, h, w, c = frames.shape
    p = draw_augment(rng, h, w, c)
    return apply_augment(frames, p, side)


def normalize(frames: np.ndarray) -> np.ndarray:
    return ((frames - EVAL_MEAN) / EVAL_STD).astype(np.float32)


def center_crop(frame: np.ndarray, side: int) -> np.ndarray:
    h, w = frame.shape[-3:-1]
    if h < side or w < side:
        raise ShapeError(f"frame {h}x{w} is smaller than crop side {side}")
    top, left = (h - side) // 2, (w - side) // 2
    return frame[..., top:top + side, left:left + side, :]


def preprocess_eval(frame: np.ndarray, side: int) -> np.ndarray:
    """Centre crop to ``side`` and normalise with mean 0.5 / std 0.5; works on a frame or a stack."""
    return normalize(center_crop(np.asarray(frame, dtype=np.float32), side))


# -- synthetic activity corpus -----------------------------------------------------------------

ACTOR_PLACEMENTS = ("left", "right", "above", "below", "none")
BOX_COLOR = np.array([0.95, 0.65, 0.15], dtype=np.float32)
ACTOR_COLOR = np.array([0.15, 0.45, 0.95], dtype=np.float32)
BACKGROUND = 0.1


@dataclass
class SyntheticClass:
    label: str
    direction: tuple[float, float]  # (dx, dy) in image coordinates; dy < 0 moves up
    actor: str = "none"
    speed_range: tuple[float, float] = (0.3, 0.5)
    captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.direction = tuple(float(v) for v in self.direction)
        self.speed_range = tuple(float(v) for v in self.speed_range)
        if self.actor not in ACTOR_PLACEMENTS:
            raise SpecError(f"actor placement must be one of {ACTOR_PLACEMENTS}, got {self.actor!r}")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise SpecError(f"speed range must be positive and ordered, got {self.speed_range}")
        if not self.label.strip():
            raise SpecError("class label must be non-empty")

    @property
    def unit_direction(self) -> np.ndarray:
        v = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


@dataclass
class SyntheticSpec:
    classes: list[SyntheticClass]
    clips_per_class: int = 16
    frames_per_clip: int = 48
    canvas_side: int = 32
    sprite_side: int = 8
    actor_side: int = 4
    noise: float = 0.05
    fps: float = 30.0
    seed: int = 0
    clip_dir: str = "clips"

    def __post_init__(self):
        self.classes = [c if isinstance(c, SyntheticClass) else SyntheticClass(**c) for c in self.classes]
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise SpecError(f"class labels must be distinct: {labels}")
        if not self.classes:
            raise SpecError("spec needs at least one class")
        if self.clips_per_class < 1 or self.frames_per_clip < 1:
            raise SpecError("clips_per_class and frames_per_clip must be >= 1")
        if self.noise < 0:
            raise SpecError("noise amplitude must be non-negative")
        for c in self.classes:
            travel = c.speed_range[1] * (self.frames_per_clip - 1) * np.abs(c.unit_direction)
            need = self.sprite_side + 2 * self.actor_side + travel
            if np.any(need > self.canvas_side):
                raise SpecError(f"class {c.label!r}: sprite, actor and travel need {need.max():.1f} px "
                                f"but the canvas is {self.canvas_side} px")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def _actor_offset(actor: str, sprite: int, actor_side: int) -> tuple[int, int]:
    centre = (sprite - actor_side) // 2
    return {
        "left": (-actor_side, centre),
        "right": (sprite, centre),
        "above": (centre, -actor_side),
        "below": (centre, sprite),
    }[actor]


def render_clip(spec: SyntheticSpec, cls: SyntheticClass, rng: np.random.Generator) -> np.ndarray:
    """One clip of ``cls``: a box travelling along the class direction with the actor attached."""
    n, side, s, a = spec.frames_per_clip, spec.canvas_side, spec.sprite_side, spec.actor_side
    speed = rng.uniform(*cls.speed_range)
    step = cls.unit_direction * speed
    travel = step * (n - 1)
    # actor margin is reserved on every side so start positions do not depend on the placement
    lo = a - np.minimum(travel, 0)
    hi = side - a - s - np.maximum(travel, 0)
    x0, y0 = rng.uniform(lo, hi)
    noise = rng.uniform(-spec.noise, spec.noise, size=(n, side, side, 3)) if spec.noise > 0 else None

    frames = np.full((n, side, side, 3), BACKGROUND, dtype=np.float32)
    for t in range(n):
        x = int(round(x0 + step[0] * t))
        y = int(round(y0 + step[1] * t))
        frames[t, y:y + s, x:x + s] = BOX_COLOR
        if cls.actor != "none":
            ox, oy = _actor_offset(cls.actor, s, a)
            frames[t, y + oy:y + oy + a, x + ox:x + ox + a] = ACTOR_COLOR
    if noise is not None:
        frames += noise.astype(np.float32)
    return np.clip(frames, 0.0, 1.0)


def clip_rng(seed: int, clip_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, clip_index]))


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced in-memory corpus: ``clips_per_class`` clips for every class, full-window rows."""
    entries, clips = [], {}
    index = 0
    for cls in spec.classes:
        for _ in range(spec.clips_per_class):
            frames = render_clip(spec, cls, clip_rng(spec.seed, index))
            path = f"{spec.clip_dir}/{index:05d}.vclp"
            clips[path] = VideoClip(frames, spec.fps)
            entries.append(ManifestEntry(path, cls.label, 0, spec.frames_per_clip))
            index += 1
    return Dataset(Path("."), entries, clips)


def write_dataset(spec: SyntheticSpec, out_dir) -> Dataset:
    out = Path(out_dir)
    ds = gen_synthetic(spec)
    ds.save(out)
    captions = {c.label: c.captions for c in spec.classes if c.captions}
    if captions:
        (out / "captions.json").write_text(json.dumps(captions, indent=2, sort_keys=True) + "\n")
    return Dataset(out, ds.entries, ds._cache)


def load_captions(root) -> dict[str, list[str]]:
    path = Path(root) / "captions.json"
    return json.loads(path.read_text()) if path.exists() else {}
