"""Two-tower multimodal classifier for five-option visual puzzles.

Vision and text transformers are fused by cross-attention (vision rows as
queries, text rows as keys and values), pooled, and scored by a five-way
linear head.  A contrastive image/option matching model serves as the
baseline.  Everything runs on a small numpy autodiff engine.
"""

from .ablation import AblationReport, AblationRow, ablate
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PuzzleInstance, SplitSpec, load_manifest, puzzle_split, synth_puzzles, write_manifest
from .encoders import EncoderConfig, TokenSequence, Vocabulary, tokenize
from .fusion import AlignDirection, PoolVariant
from .model import HeadKind, ModelConfig, build_model, build_vocab
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AblationReport",
    "AblationRow",
    "AlignDirection",
    "EncoderConfig",
    "HeadKind",
    "ModelConfig",
    "PoolVariant",
    "PuzzleInstance",
    "SplitSpec",
    "TokenSequence",
    "TrainConfig",
    "Vocabulary",
    "ablate",
    "build_model",
    "build_vocab",
    "evaluate",
    "load_checkpoint",
    "load_manifest",
    "puzzle_split",
    "save_checkpoint",
    "synth_puzzles",
    "tokenize",
    "train",
    "write_manifest",
]
