"""Five-way answer head, its loss, and the contrastive matching baseline."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError, InputError
from .layers import Linear, Module

N_OPTIONS = 5
# CLIP convention: logit scale starts at 1/0.07 and is learned in log space.
INIT_LOGIT_SCALE = math.log(1.0 / 0.07)
MAX_LOGIT_SCALE = math.log(100.0)


class ClassificationHead(Module):
    def __init__(self, d: int, rng, dtype=np.float32):
        self.d = d
        self.linear = Linear(d, N_OPTIONS, rng, dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        if pooled.shape[-1] != self.d:
            raise DimensionError(f"head expects width {self.d}, got {pooled.shape}")
        return self.linear(pooled)


def classify(pooled: Tensor, head: ClassificationHead) -> Tensor:
    return head(pooled)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the batch.

    ``logits`` is (5,) with an int target, or (B, 5) with B targets.
    """
    target = np.asarray(target)
    if logits.shape[-1] != N_OPTIONS:
        raise DimensionError(f"expected {N_OPTIONS} logits, got shape {logits.shape}")
    if np.any(target < 0) or np.any(target >= N_OPTIONS) or target.dtype.kind not in "iu":
        raise InputError(f"target must be an option index in 0..{N_OPTIONS - 1}, got {target}")
    logp = ad.log_softmax(logits)
    if logits.ndim == 1:
        return -logp[int(target)]
    picked = logp[np.arange(logits.shape[0]), target]
    return -ad.mean(picked)


def predict(logits) -> np.ndarray | int:
    """Argmax over the last axis; ties resolve to the lowest index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    out = np.argmax(values, axis=-1)
    return int(out) if out.ndim == 0 else out


def l2_normalize(x: Tensor) -> Tensor:
    norm2 = (x * x).sum(axis=-1, keepdims=True)
    if np.any(norm2.data == 0):
        raise InputError("cannot normalise a zero-norm embedding")
    return x / ad.sqrt(norm2)


def cosine_scores(img_emb: Tensor, option_embs: Tensor) -> Tensor:
    """Cosine similarity of (..., d) image embeddings with (..., 5, d) option embeddings."""
    if option_embs.shape[-1] != img_emb.shape[-1] or option_embs.shape[-2] != N_OPTIONS:
        raise DimensionError(f"cosine_scores: image {img_emb.shape}, options {option_embs.shape}")
    a = l2_normalize(img_emb)
    b = l2_normalize(option_embs)
    lead = a.shape[:-1]
    a = ad.reshape(a, (*lead, 1, a.shape[-1]))
    return (a * b).sum(axis=-1)


def match_baseline(img_emb, option_embs) -> tuple[np.ndarray, int]:
    """Cosine score per option and the best-matching option index."""
    img = ad.as_tensor(img_emb)
    opts = ad.as_tensor(np.stack([np.asarray(getattr(o, "data", o)) for o in option_embs]))
    with ad.no_grad():
        scores = cosine_scores(img, opts).data
    return scores, predict(scores)


class MatchingHead(Module):
    """Temperature-scaled cosine logits between image and option embeddings."""

    def __init__(self, dtype=np.float32):
        self.log_scale = Parameter(np.array(INIT_LOGIT_SCALE, dtype=dtype))

    def clamp(self) -> None:
        np.clip(self.log_scale.data, 0.0, MAX_LOGIT_SCALE, out=self.log_scale.data)

    def __call__(self, img_emb: Tensor, option_embs: Tensor) -> Tensor:
        return ad.exp(self.log_scale) * cosine_scores(img_emb, option_embs)
