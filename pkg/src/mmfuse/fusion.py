"""Cross-modal fusion: alignment projection, cross-attention block, pooling.

Queries always come from the vision sequence and keys/values from the text
sequence.  The alignment direction only decides which tower is projected into
the other's width.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError
from .layers import INIT_STD, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


class AlignDirection(enum.Enum):
    TextToImage = "T_to_I"
    ImageToText = "I_to_T"


class PoolVariant(enum.Enum):
    FirstTokenPool = "BERT"
    AttnPool = "Attn-pool"


def parse_align(value) -> AlignDirection:
    if isinstance(value, AlignDirection):
        return value
    for member in AlignDirection:
        if value in (member.value, member.name):
            return member
    raise ConfigError(f"unknown align direction {value!r}")


def parse_pool(value) -> PoolVariant:
    if isinstance(value, PoolVariant):
        return value
    aliases = {"first": PoolVariant.FirstTokenPool, "cls": PoolVariant.FirstTokenPool, "attn": PoolVariant.AttnPool}
    if value in aliases:
        return aliases[value]
    for member in PoolVariant:
        if value in (member.value, member.name):
            return member
    raise ConfigError(f"unknown pool variant {value!r}")


@dataclass(frozen=True)
class FusionConfig:
    d_fuse: int
    n_heads: int = 4
    n_blocks: int = 1
    align: AlignDirection = AlignDirection.TextToImage
    pool: PoolVariant = PoolVariant.AttnPool
    ffn: bool = True

    def __post_init__(self):
        if self.d_fuse <= 0 or self.n_heads <= 0 or self.d_fuse % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_fuse={self.d_fuse}")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")


def fused_width(d_vision: int, d_text: int, direction: AlignDirection) -> int:
    return d_vision if direction is AlignDirection.TextToImage else d_text


class Aligner(Module):
    """Linear projection of one tower into the other's feature width."""

    def __init__(self, d_vision: int, d_text: int, direction: AlignDirection, rng, dtype=np.float32):
        self.d_vision = d_vision
        self.d_text = d_text
        self.direction = direction
        if direction is AlignDirection.TextToImage:
            self.proj = Linear(d_text, d_vision, rng, dtype)
        else:
            self.proj = Linear(d_vision, d_text, rng, dtype)

    @property
    def d_fuse(self) -> int:
        return fused_width(self.d_vision, self.d_text, self.direction)

    def set_identity(self) -> None:
        w = self.proj.weight
        if w.shape[0] != w.shape[1]:
            raise DimensionError(f"identity init needs a square projection, got {w.shape}")
        w.data[...] = np.eye(w.shape[0], dtype=w.dtype)
        self.proj.bias.data[...] = 0

    def __call__(self, vision: Tensor, text: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(q_src, kv_src)``, both of width ``d_fuse``."""
        if vision.shape[-1] != self.d_vision or text.shape[-1] != self.d_text:
            raise DimensionError(
                f"align: expected widths ({self.d_vision}, {self.d_text}), "
                f"got vision {vision.shape} and text {text.shape}"
            )
        if self.direction is AlignDirection.TextToImage:
            return vision, self.proj(text)
        return self.proj(vision), text


def align(vision: Tensor, text: Tensor, aligner: Aligner) -> tuple[Tensor, Tensor]:
    return aligner(vision, text)


class FusionBlock(Module):
    """Pre-norm cross-attention block; the residual stream is the vision side."""

    def __init__(self, d: int, n_heads: int, rng, dtype=np.float32, ffn: bool = True):
        self.ln_q = LayerNorm(d, dtype)
        self.ln_kv = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ln_ffn = LayerNorm(d, dtype) if ffn else None
        self.ffn = FeedForward(d, rng, dtype) if ffn else None

    def __call__(self, q_src: Tensor, kv_src: Tensor, kv_mask) -> Tensor:
        x = q_src + self.attn(self.ln_q(q_src), self.ln_kv(kv_src), kv_mask)
        if self.ffn is not None:
            x = x + self.ffn(self.ln_ffn(x))
        return x


class FusionModule(Module):
    def __init__(self, cfg: FusionConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.blocks = [
            FusionBlock(cfg.d_fuse, cfg.n_heads, rng, dtype, ffn=cfg.ffn) for _ in range(cfg.n_blocks)
        ]

    def __call__(self, q_src: Tensor, kv_src: Tensor, kv_mask) -> Tensor:
        x = q_src
        for block in self.blocks:
            x = block(x, kv_src, kv_mask)
        return x


def fuse_block(q_src: Tensor, kv_src: Tensor, kv_mask, fusion: FusionModule) -> Tensor:
    return fusion(q_src, kv_src, kv_mask)


class FirstTokenPooler(Module):
    """BERT pooler: ``tanh(W x[0] + b)`` over the leading (CLS) position."""

    def __init__(self, d: int, rng, dtype=np.float32):
        self.dense = Linear(d, d, rng, dtype)

    def __call__(self, fused: Tensor) -> Tensor:
        return ad.tanh(self.dense(fused[..., 0, :]))


class AttnPooler(Module):
    """MAP head: one learned probe attends over all rows, then a residual FFN."""

    def __init__(self, d: int, n_heads: int, rng, dtype=np.float32):
        self.probe = Parameter(rng.normal(0, INIT_STD, size=(1, d)).astype(dtype))
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ln = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, rng, dtype)

    def __call__(self, fused: Tensor) -> Tensor:
        x = self.attn(self.probe, fused)
        x = x + self.ffn(self.ln(x))
        return x[..., 0, :]


def make_pooler(cfg: FusionConfig, rng, dtype=np.float32) -> Module:
    if cfg.pool is PoolVariant.FirstTokenPool:
        return FirstTokenPooler(cfg.d_fuse, rng, dtype)
    return AttnPooler(cfg.d_fuse, cfg.n_heads, rng, dtype)


def pool(fused: Tensor, pooler: Module) -> Tensor:
    if fused.shape[-2] < 1:
        raise DimensionError("pool needs at least one row")
    return pooler(fused)
