"""Vision and text towers plus their input pipelines."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DimensionError, InputError
from .layers import INIT_STD, LayerNorm, Linear, Module, TransformerBlock

UNK_ID, BOS_ID, PAD_ID = 0, 1, 2
SPECIAL_TOKENS = ("<unk>", "<bos>", "<pad>")
OPTION_LETTERS = "ABCDE"
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_heads: int
    n_layers: int
    patch_size: int = 8
    image_side: int = 32
    vocab_size: int = 512
    max_seq_len: int = 64

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"EncoderConfig.{key} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.image_side % self.patch_size:
            raise ConfigError(
                f"patch_size={self.patch_size} does not divide image_side={self.image_side}"
            )
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ConfigError("vocab_size must leave room beyond the reserved ids")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2


# Desk-scale stand-ins for the encoder-variant axis of the ablation grid.
PRESETS: dict[str, EncoderConfig] = {
    "tiny": EncoderConfig(d_model=64, n_heads=4, n_layers=2),
    "small": EncoderConfig(d_model=96, n_heads=4, n_layers=2),
}


def preset(name: str) -> EncoderConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# image pipeline


def preprocess_image(pixels: np.ndarray, image_side: int) -> np.ndarray:
    """Nearest-neighbour resize to ``image_side`` square, then standardise.

    Channels are scaled to [0, 1] and mapped through ``(v - 0.5) / 0.5``.
    Returns float32 of shape (image_side, image_side, 3).
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 raster, got shape {pixels.shape}")
    h, w, _ = pixels.shape
    if h < 1 or w < 1:
        raise InputError("empty image")
    rows = (np.arange(image_side) * h) // image_side
    cols = (np.arange(image_side) * w) // image_side
    resized = pixels[rows[:, None], cols[None, :]]
    scaled = resized.astype(np.float32) / 255.0
    return (scaled - PIXEL_MEAN) / PIXEL_STD


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """(S, S, C) -> ((S/p)^2, C p^2); patches in raster order, each flattened row-major."""
    img = np.asarray(img)
    s = img.shape[0]
    if img.ndim != 3 or img.shape[1] != s:
        raise DimensionError(f"patchify expects a square S x S x C image, got {img.shape}")
    if s % patch_size:
        raise DimensionError(f"patch_size {patch_size} does not divide image side {s}")
    g, c = s // patch_size, img.shape[2]
    x = img.reshape(g, patch_size, g, patch_size, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    n = patches.shape[0]
    g = int(round(n**0.5))
    if g * g != n or patches.shape[1] != channels * patch_size**2:
        raise DimensionError(f"cannot reassemble patches of shape {patches.shape}")
    x = patches.reshape(g, g, patch_size, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * patch_size, g * patch_size, channels)


# ---------------------------------------------------------------------------
# text pipeline


def render_prompt(question: str, options: Sequence[str]) -> str:
    if len(options) != 5:
        raise InputError(f"expected exactly 5 options, got {len(options)}")
    parts = " ".join(f"{letter}. {opt}" for letter, opt in zip(OPTION_LETTERS, options))
    return f"Question: {question} Options: {parts}"


def render_option_prompt(question: str, option: str) -> str:
    """Text paired with one candidate answer (matching baseline input)."""
    return f"Question: {question} Answer: {option}"


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary with reserved UNK=0, BOS=1, PAD=2."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 512) -> "Vocabulary":
        """Most frequent words first, ties alphabetical, capped at ``max_size`` ids."""
        counts = Counter(w for text in texts for w in split_words(text))
        for special in SPECIAL_TOKENS:
            counts.pop(special, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        room = max_size - len(SPECIAL_TOKENS)
        return cls(tok for tok, _ in ranked[:room])

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.itos)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        itos: dict[int, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit():
                raise InputError(f"{path}:{lineno}: expected 'token<TAB>id'")
            itos[int(idx)] = tok
        if sorted(itos) != list(range(len(itos))):
            raise InputError(f"{path}: ids are not contiguous from 0")
        ordered = [itos[i] for i in range(len(itos))]
        if tuple(ordered[:3]) != SPECIAL_TOKENS:
            raise InputError(f"{path}: reserved ids 0/1/2 must be {SPECIAL_TOKENS}")
        return cls(ordered[3:])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return sum(self.mask)


def encode_words(words: Sequence[str], vocab: Vocabulary, max_seq_len: int) -> TokenSequence:
    ids = [BOS_ID] + [vocab.id(w) for w in words]
    ids = ids[:max_seq_len]
    n = len(ids)
    pad = max_seq_len - n
    return TokenSequence(tuple(ids) + (PAD_ID,) * pad, (1,) * n + (0,) * pad)


def tokenize(question: str, options: Sequence[str], vocab: Vocabulary, max_seq_len: int = 64) -> TokenSequence:
    """Render the question+options prompt and map it to padded token ids."""
    if not question or not question.strip():
        raise InputError("question must be non-empty")
    return encode_words(split_words(render_prompt(question, options)), vocab, max_seq_len)


def tokenize_option(question: str, option: str, vocab: Vocabulary, max_seq_len: int = 64) -> TokenSequence:
    return encode_words(split_words(render_option_prompt(question, option)), vocab, max_seq_len)


# ---------------------------------------------------------------------------
# towers


class VisionEncoder(Module):
    """ViT-style tower: patch embedding, CLS token, positions, pre-norm blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = Linear(cfg.patch_dim, d, rng, dtype)
        self.cls = Parameter(rng.normal(0, INIT_STD, size=(1, d)).astype(dtype))
        self.pos = Parameter(rng.normal(0, INIT_STD, size=(cfg.n_patches + 1, d)).astype(dtype))
        self.blocks = [TransformerBlock(d, cfg.n_heads, rng, dtype) for _ in range(cfg.n_layers)]
        self.ln_out = LayerNorm(d, dtype)

    def __call__(self, patches) -> Tensor:
        """(..., Nv, 3p^2) patches -> (..., Nv + 1, d) features, CLS first."""
        x = ad.as_tensor(patches, self.pos.dtype)
        if x.shape[-1] != self.cfg.patch_dim or x.shape[-2] != self.cfg.n_patches:
            raise DimensionError(
                f"vision tower expects (..., {self.cfg.n_patches}, {self.cfg.patch_dim}), got {x.shape}"
            )
        tokens = self.patch_embed(x)
        lead = tokens.shape[:-2]
        cls = ad.mul(self.cls, np.ones((*lead, 1, 1), dtype=tokens.dtype))
        x = ad.concat([cls, tokens], axis=-2) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)


class TextEncoder(Module):
    """Token + position embeddings followed by masked pre-norm blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.tok = Parameter(rng.normal(0, INIT_STD, size=(cfg.vocab_size, d)).astype(dtype))
        self.pos = Parameter(rng.normal(0, INIT_STD, size=(cfg.max_seq_len, d)).astype(dtype))
        self.blocks = [TransformerBlock(d, cfg.n_heads, rng, dtype) for _ in range(cfg.n_layers)]
        self.ln_out = LayerNorm(d, dtype)

    def __call__(self, ids, mask) -> Tensor:
        """(..., Nt) ids and mask -> (..., Nt, d) features."""
        ids = np.asarray(ids)
        mask = np.asarray(mask)
        if ids.shape != mask.shape:
            raise DimensionError(f"ids {ids.shape} and mask {mask.shape} differ")
        n = ids.shape[-1]
        if n > self.cfg.max_seq_len:
            raise DimensionError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError(f"token id out of range [0, {self.cfg.vocab_size})")
        x = ad.embedding(self.tok, ids) + self.pos[:n]
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_out(x)


def encode_vision(patches, encoder: VisionEncoder) -> Tensor:
    return encoder(patches)


def encode_text(seq: TokenSequence, encoder: TextEncoder) -> Tensor:
    return encoder(np.asarray(seq.ids), np.asarray(seq.mask))
