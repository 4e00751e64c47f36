"""A small video-text contrastive classifier.

Text is encoded by a byte-level transformer read out at the EOS token. Each
frame is cut into square patches and encoded by a second transformer. A
third, temporal transformer mixes the per-frame vectors before pooling.
Both towers end in a projection and unit normalisation, and a label is
scored by cosine similarity divided by a learnable temperature.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, DomainError, FormatError, ShapeError
from .tensor import Tensor

PAD, BOS, EOS, UNK = 256, 257, 258, 259
CHECKPOINT_MAGIC = b"VTAR"
CHECKPOINT_VERSION = 1
_NEG_INF = -1e9


@dataclass
class ModelConfig:
    embed_dim: int = 64
    text_layers: int = 2
    frame_layers: int = 2
    temporal_layers: int = 1
    heads: int = 4
    patch_size: int = 8
    frame_side: int = 32
    channels: int = 3
    frames_per_clip: int = 32
    max_tokens: int = 32
    vocab_size: int = 260
    mlp_ratio: int = 4
    temperature_init: float = 0.07
    init_std: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.frame_side % self.patch_size:
            raise ValueError(f"frame_side {self.frame_side} not divisible by patch_size {self.patch_size}")
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be >= 1")
        if self.max_tokens < 2:
            raise ValueError("max_tokens must leave room for BOS and EOS")
        if self.vocab_size < 260:
            raise ValueError("vocab_size must cover 256 bytes plus PAD/BOS/EOS/UNK")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not self.temperature_init > 0:
            raise ValueError("temperature_init must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def patches_per_frame(self) -> int:
        return (self.frame_side // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tokenize(prompt: str, max_tokens: int = 32) -> list[int]:
    """Lowercased UTF-8 bytes wrapped in BOS/EOS and padded to ``max_tokens``."""
    body = list(prompt.lower().encode("utf-8"))[: max_tokens - 2]
    ids = [BOS, *body, EOS]
    return ids + [PAD] * (max_tokens - len(ids))


def check_prompt(prompt: str) -> str:
    if not isinstance(prompt, str) or not prompt.strip():
        raise DataError(f"label prompt must be non-empty text, got {prompt!r}")
    return prompt


# -- parameter initialisation ---------------------------------------------------------------

def _block_shapes(prefix: str, d: int, hidden: int) -> dict:
    return {
        f"{prefix}.ln1.gain": (d,), f"{prefix}.ln1.bias": (d,),
        f"{prefix}.attn.query.weight": (d, d), f"{prefix}.attn.query.bias": (d,),
        f"{prefix}.attn.key.weight": (d, d),
        f"{prefix}.attn.value.weight": (d, d), f"{prefix}.attn.value.bias": (d,),
        f"{prefix}.attn.out.weight": (d, d), f"{prefix}.attn.out.bias": (d,),
        f"{prefix}.ln2.gain": (d,), f"{prefix}.ln2.bias": (d,),
        f"{prefix}.mlp.fc1.weight": (d, hidden), f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, d), f"{prefix}.mlp.fc2.bias": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    shapes = {
        "text.token_embed": (cfg.vocab_size, d),
        "text.pos_embed": (cfg.max_tokens, d),
    }
    for i in range(cfg.text_layers):
        shapes.update(_block_shapes(f"text.block{i}", d, hidden))
    shapes.update({"text.ln_final.gain": (d,), "text.ln_final.bias": (d,), "text.proj": (d, d),
                   "frame.patch.weight": (patch_dim, d), "frame.patch.bias": (d,),
                   "frame.pos_embed": (cfg.patches_per_frame, d)})
    for i in range(cfg.frame_layers):
        shapes.update(_block_shapes(f"frame.block{i}", d, hidden))
    shapes.update({"frame.ln_final.gain": (d,), "frame.ln_final.bias": (d,),
                   "temporal.pos_embed": (cfg.frames_per_clip, d)})
    for i in range(cfg.temporal_layers):
        shapes.update(_block_shapes(f"temporal.block{i}", d, hidden))
    shapes.update({"temporal.ln_final.gain": (d,), "temporal.ln_final.bias": (d,),
                   "video.proj": (d, d), "log_temperature": (1,)})
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "log_temperature":
            data = np.full(shape, math.log(cfg.temperature_init))
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


# -- building blocks ----------------------------------------------------------------------------

def _linear(x: Tensor, p: dict, prefix: str) -> Tensor:
    return x @ p[f"{prefix}.weight"] + p[f"{prefix}.bias"]


def _attention(x: Tensor, p: dict, prefix: str, heads: int, key_mask: np.ndarray | None) -> Tensor:
    b, n, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, heads, dh).permute(0, 2, 1, 3)

    # no key bias: it shifts every score of a query equally, so softmax cancels it
    q = split(_linear(x, p, f"{prefix}.query"))
    k = split(x @ p[f"{prefix}.key.weight"])
    v = split(_linear(x, p, f"{prefix}.value"))
    scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = scores + key_mask
    mixed = T.softmax(scores) @ v
    return _linear(mixed.permute(0, 2, 1, 3).reshape(b, n, d), p, f"{prefix}.out")


def _block(x: Tensor, p: dict, prefix: str, heads: int, key_mask=None) -> Tensor:
    h = T.layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    x = x + _attention(h, p, f"{prefix}.attn", heads, key_mask)
    h = T.layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    h = _linear(T.relu(_linear(h, p, f"{prefix}.mlp.fc1")), p, f"{prefix}.mlp.fc2")
    return x + h


def similarity_logits(video_emb: Tensor, label_embs: Tensor, temperature: float) -> Tensor:
    """Cosine similarity of unit embeddings divided by ``temperature``.

    ``video_emb`` is (d,) or (B, d); ``label_embs`` is (K, d).
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    v = video_emb.reshape(1, -1) if video_emb.ndim == 1 else video_emb
    logits = (v @ label_embs.permute(1, 0)) * (1.0 / temperature)
    return logits.reshape(-1) if video_emb.ndim == 1 else logits


def info_nce(logits: Tensor) -> Tensor:
    """Symmetric InfoNCE over a (B, B) logit matrix whose diagonal holds the positives."""
    b = logits.shape[0]
    targets = range(b)
    return (T.cross_entropy_from_logits(logits, targets)
            + T.cross_entropy_from_logits(logits.permute(1, 0), targets)) * 0.5


class VideoTextModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in self.params:
                raise FormatError(f"missing parameter {name!r}")
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    # -- parameter groups --------------------------------------------------------------
    def text_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("text.")]

    def set_text_trainable(self, trainable: bool) -> None:
        for n in self.text_param_names():
            self.params[n].requires_grad = trainable

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def temperature(self) -> float:
        return float(np.exp(self.params["log_temperature"].data[0]))

    # -- encoders ---------------------------------------------------------------------
    def encode_tokens(self, token_ids) -> Tensor:
        """(B, max_tokens) token ids -> (B, d) unit text embeddings."""
        cfg, p = self.cfg, self.params
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        b, n = ids.shape
        if n != cfg.max_tokens:
            raise ShapeError(f"expected {cfg.max_tokens} tokens per prompt, got {n}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        x = T.embedding(p["text.token_embed"], ids) + p["text.pos_embed"]
        mask = np.where(ids == PAD, _NEG_INF, 0.0).astype(cfg.np_dtype).reshape(b, 1, 1, n)
        for i in range(cfg.text_layers):
            x = _block(x, p, f"text.block{i}", cfg.heads, mask)
        x = T.layer_norm(x, p["text.ln_final.gain"], p["text.ln_final.bias"])
        eos = np.argmax(ids == EOS, axis=1)
        pooled = x[np.arange(b), eos]
        return T.l2_normalize(pooled @ p["text.proj"])

    def encode_texts(self, prompts: Sequence[str]) -> Tensor:
        for pr in prompts:
            check_prompt(pr)
        return self.encode_tokens([tokenize(pr, self.cfg.max_tokens) for pr in prompts])

    def encode_text(self, tokens) -> Tensor:
        """One prompt (string or token ids) -> (d,) unit embedding."""
        if isinstance(tokens, str):
            tokens = tokenize(tokens, self.cfg.max_tokens)
        return self.encode_tokens([tokens]).reshape(-1)

    def encode_frames(self, frames) -> Tensor:
        """(M, S, S, C) frames -> (M, d) mean-pooled patch states (not normalised)."""
        cfg, p = self.cfg, self.params
        arr = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=cfg.np_dtype)
        s, ps, c = cfg.frame_side, cfg.patch_size, cfg.channels
        if arr.ndim != 4 or arr.shape[1:] != (s, s, c):
            raise ShapeError(f"expected frames of shape (M, {s}, {s}, {c}), got {arr.shape}")
        m, g = arr.shape[0], s // ps
        patches = arr.reshape(m, g, ps, g, ps, c).transpose(0, 1, 3, 2, 4, 5).reshape(m, g * g, ps * ps * c)
        x = _linear(Tensor(patches), p, "frame.patch") + p["frame.pos_embed"]
        for i in range(cfg.frame_layers):
            x = _block(x, p, f"frame.block{i}", cfg.heads)
        x = T.layer_norm(x, p["frame.ln_final.gain"], p["frame.ln_final.bias"])
        return x.mean(axis=1)

    def encode_frame(self, frame) -> Tensor:
        arr = np.asarray(frame.data if isinstance(frame, Tensor) else frame)
        s = self.cfg.frame_side
        if arr.ndim != 3 or arr.shape[:2] != (s, s):
            raise ShapeError(f"expected a {s}x{s} frame, got shape {arr.shape}")
        return self.encode_frames(arr[None]).reshape(-1)

    def encode_videos(self, clips) -> Tensor:
        """(B, N, S, S, C) clips -> (B, d) unit video embeddings."""
        cfg, p = self.cfg, self.params
        arr = np.asarray(clips, dtype=cfg.np_dtype)
        if arr.ndim != 5 or arr.shape[1] != cfg.frames_per_clip:
            raise ShapeError(f"expected clips of shape (B, {cfg.frames_per_clip}, S, S, C), got {arr.shape}")
        b, n = arr.shape[:2]
        per_frame = self.encode_frames(arr.reshape(b * n, *arr.shape[2:]))
        x = per_frame.reshape(b, n, cfg.embed_dim) + p["temporal.pos_embed"]
        for i in range(cfg.temporal_layers):
            x = _block(x, p, f"temporal.block{i}", cfg.heads)
        x = T.layer_norm(x, p["temporal.ln_final.gain"], p["temporal.ln_final.bias"])
        return T.l2_normalize(x.mean(axis=1) @ p["video.proj"])

    def encode_video(self, frames) -> Tensor:
        arr = np.asarray(frames)
        if arr.ndim != 4 or arr.shape[0] != self.cfg.frames_per_clip:
            raise ShapeError(f"expected {self.cfg.frames_per_clip} frames, got shape {arr.shape}")
        return self.encode_videos(arr[None]).reshape(-1)

    # -- heads and losses ----------------------------------------------------------------
    def scaled_logits(self, video_embs: Tensor, label_embs: Tensor) -> Tensor:
        """Cosine logits divided by the learnable temperature (differentiable in it)."""
        scale = T.exp(-self.params["log_temperature"])
        return (video_embs @ label_embs.permute(1, 0)) * scale

    def classify(self, clip, prompts: Sequence[str]) -> tuple[int, np.ndarray]:
        idx, probs = self.classify_batch(np.asarray(clip)[None], prompts)
        return int(idx[0]), probs[0]

    def classify_batch(self, clips, prompts: Sequence[str], label_embs: Tensor | None = None):
        """Predicted indices (lowest index wins ties) and probability rows for a clip batch."""
        if len(prompts) == 0:
            raise DomainError("classify needs at least one label prompt")
        if label_embs is None:
            label_embs = self.encode_texts(prompts)
        probs = T.softmax(self.scaled_logits(self.encode_videos(clips), label_embs)).data
        return np.argmax(probs, axis=1), probs

    def pretrain_contrastive_loss(self, clips, prompts: Sequence[str]) -> Tensor:
        if len(prompts) < 2:
            raise DataError("contrastive pre-training needs at least 2 pairs per batch")
        if len(set(prompts)) != len(prompts):
            raise DataError(f"duplicate prompts in contrastive batch: {list(prompts)}")
        if len(clips) != len(prompts):
            raise DataError(f"{len(clips)} clips but {len(prompts)} prompts")
        return info_nce(self.scaled_logits(self.encode_videos(clips), self.encode_texts(prompts)))

    def finetune_classification_loss(self, clips, targets: Sequence[int], prompts: Sequence[str],
                                     label_embs: Tensor | None = None) -> Tensor:
        if label_embs is None:
            label_embs = self.encode_texts(prompts)
        logits = self.scaled_logits(self.encode_videos(clips), label_embs)
        return T.cross_entropy_from_logits(logits, targets)

    # -- snapshots ----------------------------------------------------------------------
    def clone(self) -> "VideoTextModel":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return VideoTextModel(self.cfg, params)

    def checksum(self) -> str:
        return hashlib.sha256(encode_checkpoint(self.params)).hexdigest()


# -- checkpoint format ------------------------------------------------------------------------

def encode_checkpoint(params: dict[str, Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes, dtype="float32") -> dict[str, Tensor]:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    params = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        dims = [r.u32("dim") for _ in range(r.u32("rank"))]
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(r.take(4 * count, f"values of {name!r}"), dtype="<f4")
        params[name] = Tensor(values.reshape(dims).astype(dtype), requires_grad=True)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload", r.pos)
    return params


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: VideoTextModel, path, extra: dict | None = None) -> str:
    """Write the parameter file plus a JSON config sidecar; return the file's sha256."""
    blob = encode_checkpoint(model.params)
    Path(path).write_bytes(blob)
    meta = {"model": model.cfg.to_dict(), "checksum": hashlib.sha256(blob).hexdigest()}
    if extra:
        meta.update(extra)
    config_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta["checksum"]


def load_checkpoint(path) -> tuple[VideoTextModel, dict]:
    path = Path(path)
    try:
        meta = json.loads(config_path(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing config sidecar {config_path(path)}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt config sidecar: {exc}") from exc
    cfg = ModelConfig.from_dict(meta["model"])
    blob = path.read_bytes()
    params = decode_checkpoint(blob, cfg.dtype)
    return VideoTextModel(cfg, params), meta
