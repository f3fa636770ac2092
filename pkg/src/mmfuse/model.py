"""Full puzzle models: two towers, fusion, and either head."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PuzzleInstance
from .encoders import (
    EncoderConfig,
    TextEncoder,
    VisionEncoder,
    Vocabulary,
    patchify,
    preprocess_image,
    preset,
    render_option_prompt,
    render_prompt,
    tokenize,
    tokenize_option,
)
from .errors import ConfigError
from .fusion import (
    AlignDirection,
    Aligner,
    FusionConfig,
    FusionModule,
    PoolVariant,
    fused_width,
    make_pooler,
    parse_align,
    parse_pool,
)
from .head import ClassificationHead, MatchingHead
from .layers import Linear, Module

DTYPES = {"f32": np.float32, "f64": np.float64}


class HeadKind(enum.Enum):
    Classification = "classification"
    Matching = "matching"


@dataclass(frozen=True)
class ModelConfig:
    vision: str = "tiny"
    text: str = "tiny"
    align: AlignDirection = AlignDirection.TextToImage
    pool: PoolVariant = PoolVariant.AttnPool
    head: HeadKind = HeadKind.Classification
    n_blocks: int = 1
    fusion_heads: int = 4
    fusion_ffn: bool = True
    embed_dim: int = 64
    option_seq_len: int = 32
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "align", parse_align(self.align))
        object.__setattr__(self, "pool", parse_pool(self.pool))
        try:
            object.__setattr__(self, "head", HeadKind(self.head) if not isinstance(self.head, HeadKind) else self.head)
        except ValueError:
            raise ConfigError(f"unknown head {self.head!r}") from None
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if self.option_seq_len > self.text_config.max_seq_len:
            raise ConfigError("option_seq_len exceeds the text tower's max_seq_len")
        self.fusion_config  # validates head divisibility

    @property
    def vision_config(self) -> EncoderConfig:
        return preset(self.vision)

    @property
    def text_config(self) -> EncoderConfig:
        return preset(self.text)

    @property
    def fusion_config(self) -> FusionConfig:
        d = fused_width(self.vision_config.d_model, self.text_config.d_model, self.align)
        return FusionConfig(d, self.fusion_heads, self.n_blocks, self.align, self.pool, self.fusion_ffn)

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, bool):
                value = str(value).lower()
            out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            default = known[key].default
            if isinstance(default, bool):
                if str(value).lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ConfigError(f"{key} must be a boolean, got {value!r}")
                kwargs[key] = str(value).lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                try:
                    kwargs[key] = int(value)
                except ValueError:
                    raise ConfigError(f"{key} must be an integer, got {value!r}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def variant_names(self) -> tuple[str, str, str, str]:
        """(vision, text, align, pool) as shown in ablation reports."""
        if self.head is HeadKind.Matching:
            return f"vit-{self.vision}", f"txt-{self.text}", "NA", "NA"
        return f"vit-{self.vision}", f"txt-{self.text}", self.align.value, self.pool.value


@dataclass
class Batch:
    patches: np.ndarray  # (B, Nv, 3p^2)
    ids: np.ndarray  # (B, Nt)
    mask: np.ndarray  # (B, Nt)
    answers: np.ndarray  # (B,)
    option_ids: np.ndarray | None = None  # (B, 5, No)
    option_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.answers)

    def trimmed(self) -> "Batch":
        """Drop trailing token columns that are padding in every row."""
        n = max(int(self.mask.sum(axis=-1).max(initial=1)), 1)
        out = Batch(self.patches, self.ids[:, :n], self.mask[:, :n], self.answers)
        if self.option_ids is not None:
            k = max(int(self.option_mask.sum(axis=-1).max(initial=1)), 1)
            out.option_ids, out.option_mask = self.option_ids[..., :k], self.option_mask[..., :k]
        return out

    def take(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(
            self.patches[idx], self.ids[idx], self.mask[idx], self.answers[idx],
            pick(self.option_ids), pick(self.option_mask),
        )


def build_vocab(instances: Sequence[PuzzleInstance], max_size: int) -> Vocabulary:
    texts = []
    for inst in instances:
        texts.append(render_prompt(inst.question, inst.options))
        texts.extend(render_option_prompt(inst.question, o) for o in inst.options)
    return Vocabulary.build(texts, max_size=max_size)


class PuzzleModel(Module):
    """Shared plumbing for both heads; subclasses implement ``forward``."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        if len(vocab) > config.text_config.vocab_size:
            raise ConfigError(f"vocabulary of {len(vocab)} exceeds vocab_size {config.text_config.vocab_size}")

    def encode(self, instances: Sequence[PuzzleInstance], option_orders=None) -> Batch:
        """Preprocess images and tokenise text for a list of puzzles.

        ``option_orders``, when given, holds one permutation of ``range(5)``
        per puzzle: option ``order[i]`` is shown in slot ``i`` and the gold
        index moves with it.
        """
        vc = self.config.vision_config
        patches = np.stack(
            [patchify(preprocess_image(inst.image, vc.image_side), vc.patch_size) for inst in instances]
        ).astype(self.config.dtype)
        return self.encode_text(instances, patches, option_orders)

    def encode_text(self, instances: Sequence[PuzzleInstance], patches: np.ndarray, option_orders=None) -> Batch:
        """Tokenise the text side and attach already-preprocessed ``patches``."""
        tc = self.config.text_config
        if option_orders is None:
            option_orders = [range(5)] * len(instances)
        options = [tuple(inst.options[j] for j in order) for inst, order in zip(instances, option_orders)]
        answers = [list(order).index(inst.answer) for inst, order in zip(instances, option_orders)]
        seqs = [tokenize(inst.question, opts, self.vocab, tc.max_seq_len) for inst, opts in zip(instances, options)]
        batch = Batch(
            patches,
            np.array([s.ids for s in seqs], dtype=np.int64),
            np.array([s.mask for s in seqs], dtype=np.int64),
            np.array(answers, dtype=np.int64),
        )
        if self.config.head is HeadKind.Matching:
            n = self.config.option_seq_len
            opt = [[tokenize_option(inst.question, o, self.vocab, n) for o in row] for inst, row in zip(instances, options)]
            batch.option_ids = np.array([[s.ids for s in row] for row in opt], dtype=np.int64)
            batch.option_mask = np.array([[s.mask for s in row] for row in opt], dtype=np.int64)
        return batch.trimmed()

    def forward(self, batch: Batch) -> Tensor:
        raise NotImplementedError

    def __call__(self, batch: Batch) -> Tensor:
        return self.forward(batch)

    def logits(self, batch: Batch, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(batch), batch_size):
                out.append(self.forward(batch.take(slice(start, start + batch_size))).data)
        return np.concatenate(out) if out else np.zeros((0, 5))


class FusionClassifier(PuzzleModel):
    """Vision tower -> queries, text tower -> keys/values, fused, pooled, 5-way linear."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__(config, vocab)
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        vc, tc, fc = config.vision_config, config.text_config, config.fusion_config
        self.vision = VisionEncoder(vc, rng, dtype)
        self.text = TextEncoder(tc, rng, dtype)
        self.aligner = Aligner(vc.d_model, tc.d_model, fc.align, rng, dtype)
        self.fusion = FusionModule(fc, rng, dtype)
        self.pooler = make_pooler(fc, rng, dtype)
        self.head = ClassificationHead(fc.d_fuse, rng, dtype)

    def features(self, batch: Batch) -> tuple[Tensor, Tensor]:
        return self.vision(batch.patches), self.text(batch.ids, batch.mask)

    def pooled(self, batch: Batch) -> Tensor:
        v, t = self.features(batch)
        q_src, kv_src = self.aligner(v, t)
        return self.pooler(self.fusion(q_src, kv_src, batch.mask))

    def forward(self, batch: Batch) -> Tensor:
        return self.head(self.pooled(batch))


class MatchingModel(PuzzleModel):
    """CLIP-style two-tower scorer: image CLS vs each option prompt's BOS feature."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__(config, vocab)
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        vc, tc = config.vision_config, config.text_config
        self.vision = VisionEncoder(vc, rng, dtype)
        self.text = TextEncoder(tc, rng, dtype)
        self.image_proj = Linear(vc.d_model, config.embed_dim, rng, dtype, bias=False)
        self.text_proj = Linear(tc.d_model, config.embed_dim, rng, dtype, bias=False)
        self.head = MatchingHead(dtype)

    def embeddings(self, batch: Batch) -> tuple[Tensor, Tensor]:
        img = self.image_proj(self.vision(batch.patches)[:, 0, :])
        b, k, n = batch.option_ids.shape
        t = self.text(batch.option_ids.reshape(b * k, n), batch.option_mask.reshape(b * k, n))
        opts = ad.reshape(self.text_proj(t[:, 0, :]), (b, k, -1))
        return img, opts

    def forward(self, batch: Batch) -> Tensor:
        img, opts = self.embeddings(batch)
        return self.head(img, opts)


def build_model(config: ModelConfig, vocab: Vocabulary) -> PuzzleModel:
    if config.head is HeadKind.Matching:
        return MatchingModel(config, vocab)
    return FusionClassifier(config, vocab)
