"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DimensionError

MASK_BIAS = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02


class Module:
    """Minimal parameter tree.

    Parameters and child modules are discovered from instance attributes in
    assignment order, which fixes the naming and ordering used by optimisers
    and checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        # Xavier-style scale keeps activations O(1) at desk-scale widths
        self.weight = _normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in), dtype)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, LN_EPS)


class FeedForward(Module):
    """Position-wise ``Linear -> GELU -> Linear`` with 4x expansion."""

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32, expansion: int = 4):
        self.fc1 = Linear(d, expansion * d, rng, dtype)
        self.fc2 = Linear(expansion * d, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def key_mask_bias(mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive bias of shape (..., 1, Nk): 0 for valid keys, ``MASK_BIAS`` otherwise."""
    if mask is None:
        return None
    mask = np.asarray(mask)
    if np.any(mask.sum(axis=-1) == 0):
        raise ContractError("attention over a fully masked key sequence is undefined")
    bias = np.where(mask > 0, 0.0, MASK_BIAS).astype(dtype)
    return bias[..., None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value sources.

    Shapes: ``q_src`` (..., Nq, d), ``kv_src`` (..., Nk, d), ``kv_mask``
    (..., Nk) of {0, 1}.  Projections carry no bias.  ``probe``, when set, is
    called with the attention weights (..., h, Nq, Nk) on every forward.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % n_heads:
            raise DimensionError(f"n_heads={n_heads} does not divide d={d}")
        self.d = d
        self.n_heads = n_heads
        self.wq = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.wk = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.wv = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.wo = _normal(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        self.probe: Callable[[np.ndarray], None] | None = None

    def __call__(self, q_src: Tensor, kv_src: Tensor, kv_mask: np.ndarray | None = None) -> Tensor:
        return cross_attention(
            q_src, kv_src, kv_mask, self.n_heads, self.wq, self.wk, self.wv, self.wo, probe=self.probe
        )


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, h, d // h))
    return ad.swapaxes(x, -2, -3)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, kv_mask: np.ndarray | None = None, probe=None
) -> Tensor:
    """``softmax(q k^T / sqrt(d_k) + bias) v`` over the last two axes."""
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    bias = key_mask_bias(kv_mask, scores.dtype)
    if bias is not None:
        scores = scores + Tensor(bias)
    weights = ad.softmax(scores)
    if probe is not None:
        probe(weights.data)
    return ad.matmul(weights, v)


def cross_attention(
    q_src: Tensor,
    kv_src: Tensor,
    kv_mask: np.ndarray | None,
    n_heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    probe: Callable[[np.ndarray], None] | None = None,
) -> Tensor:
    """Multi-head attention: queries from ``q_src``, keys and values from ``kv_src``.

    Heads split the projected width evenly; their outputs are concatenated and
    mapped through ``wo``.  Masked keys get ``MASK_BIAS`` before the softmax.
    """
    d = q_src.shape[-1]
    if kv_src.shape[-1] != d or wq.shape != (d, d):
        raise DimensionError(f"cross_attention: q {q_src.shape}, kv {kv_src.shape}, wq {wq.shape}")
    if d % n_heads:
        raise DimensionError(f"n_heads={n_heads} does not divide d={d}")
    if kv_mask is not None:
        kv_mask = np.asarray(kv_mask)
        if kv_mask.shape[-1] != kv_src.shape[-2]:
            raise DimensionError(f"kv_mask {kv_mask.shape} does not match kv {kv_src.shape}")
        kv_mask = kv_mask[..., None, :]  # broadcast over heads
    q = _split_heads(ad.matmul(q_src, wq), n_heads)
    k = _split_heads(ad.matmul(kv_src, wk), n_heads)
    v = _split_heads(ad.matmul(kv_src, wv), n_heads)
    ctx = ad.swapaxes(scaled_dot_product_attention(q, k, v, kv_mask, probe), -2, -3)
    *lead, nq, _, _ = ctx.shape
    return ad.matmul(ad.reshape(ctx, (*lead, nq, d)), wo)


class TransformerBlock(Module):
    """Pre-norm self-attention block: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))
