"""Central-difference gradient checking for recorded scalar functions.

Two things make a plain float64 central difference too coarse for a 1e-6
relative tolerance on every coordinate of a transformer:

* Roundoff. The loss carries ~1e-16 relative noise, which swamps the
  difference quotient of coordinates whose derivative is ~1e-7 of the
  loss. Probes therefore run in extended precision (``np.longdouble``)
  while the analytic gradient under test stays in float64.
* ReLU kinks. A probe pair straddling a kink measures a chord. Each pair
  compares the ReLU input sign patterns of its two recorded graphs and
  retries with a smaller step when they differ.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .model import ModelConfig, VideoTextModel
from .tensor import Tensor, _topological_order

MAX_STEP_SHRINKS = 8
GRADCHECK_TOL = 1e-6
ORACLE_DTYPE = np.longdouble


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def relu_pattern(out: Tensor) -> bytes:
    """Sign pattern of every ReLU input in the graph that produced ``out``."""
    chunks = []
    for node in _topological_order(out):
        if node._op == "relu":
            chunks.append(np.packbits(node._parents[0].data > 0).tobytes())
    return b"".join(chunks)


def _probe(f: Callable[[], Tensor]):
    out = f()
    # stay in the probe's own precision; a Python float would round to float64
    return out.data.reshape(()), relu_pattern(out)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        h = eps
        for _ in range(MAX_STEP_SHRINKS):
            flat[i] = orig + h
            xp = flat[i]
            fp, sp = _probe(f)
            flat[i] = orig - h
            xm = flat[i]
            fm, sm = _probe(f)
            if sp == sm:
                break
            h *= 0.25
        flat[i] = orig
        # divide by the step actually taken, not the nominal 2h
        out[i] = (fp - fm) / (xp - xm)
    return out.reshape(x.shape)


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    eps: float = 1e-5, oracle_dtype=ORACLE_DTYPE) -> dict[str, float]:
    """Worst relative error per named tensor for the zero-argument scalar function ``f``.

    The analytic gradients come from one float64 backward pass. For the
    finite differences every tensor in ``tensors`` is temporarily widened to
    ``oracle_dtype``; pass ``np.float64`` to probe at plain double precision.
    """
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name!r} is {t.dtype}")
        t.grad = None
    f().backward()
    analytic = {name: np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
                for name, t in tensors.items()}
    saved = {name: t.data for name, t in tensors.items()}
    try:
        for t in tensors.values():
            t.data = t.data.astype(oracle_dtype)
        errors = {}
        for name, t in tensors.items():
            numeric = numeric_grad(f, t, eps)
            errors[name] = float(relative_error(analytic[name], numeric).max(initial=0.0))
    finally:
        for name, t in tensors.items():
            t.data = saved[name]
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               oracle_dtype=ORACLE_DTYPE) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    return grad_check_many(lambda: f(x), {"x": x}, eps, oracle_dtype)["x"]


def micro_config(dim: int = 8, layers: int = 1, seed: int = 0) -> ModelConfig:
    """Smallest useful model for finite-difference checks, in float64."""
    return ModelConfig(embed_dim=dim, text_layers=layers, frame_layers=layers, temporal_layers=layers, heads=2,
                       patch_size=4, frame_side=8, frames_per_clip=2, max_tokens=12, dtype="float64",
                       init_std=0.2, seed=seed)


def run_gradcheck(dim: int = 8, layers: int = 1, seed: int = 0, eps: float = 1e-5) -> dict[str, dict[str, float]]:
    """Worst relative error per parameter tensor for both training losses."""
    model = VideoTextModel(micro_config(dim, layers, seed))
    clips = np.random.default_rng(seed).random((2, 2, 8, 8, 3))
    losses = {
        "pretrain_contrastive": lambda: model.pretrain_contrastive_loss(clips, ["push box", "lift"]),
        "finetune_classification": lambda: model.finetune_classification_loss(clips, [1, 0], ["a", "b c", "d"]),
    }
    return {name: grad_check_many(f, model.params, eps) for name, f in losses.items()}
