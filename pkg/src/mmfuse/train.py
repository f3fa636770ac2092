"""AdamW training loop and accuracy evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import PuzzleInstance, SplitSpec
from .errors import ConfigError, InputError, TrainingError
from .head import cross_entropy, predict
from .model import Batch, ModelConfig, PuzzleModel, build_model, build_vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    grad_clip_norm: float = 1.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_options: bool = False

    def __post_init__(self):
        for key in ("batch_size", "epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        for key in ("learning_rate", "weight_decay", "grad_clip_norm", "warmup_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")

    def to_dict(self) -> dict[str, str]:
        return {k: str(v).lower() if isinstance(v, bool) else repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")

        def convert(key, value):
            kind = types[key]
            if kind is bool:
                text = str(value).strip().lower()
                if text not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{key} must be a boolean, got {value!r}")
                return text in ("true", "1", "yes")
            if kind is int:
                number = float(value)
                if number != int(number):
                    raise ValueError(f"{key} must be an integer, got {value!r}")
                return int(number)
            return kind(value)

        try:
            return cls(**{k: convert(k, v) for k, v in raw.items()})
        except ValueError as exc:
            raise ConfigError(f"bad train config value: {exc}") from None


class AdamW:
    """Adam with decoupled weight decay; decay skips vectors (biases, norms)."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: PuzzleModel
    checkpoint: bytes
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_accuracy(self) -> float:
        return max((m.val_accuracy for m in self.history), default=float("nan"))


def accuracy_from_logits(logits: np.ndarray, answers: np.ndarray) -> float:
    return float(np.mean(predict(logits) == answers))


def evaluate_batch(model: PuzzleModel, batch: Batch) -> float:
    if len(batch) == 0:
        raise InputError("cannot evaluate on an empty instance list")
    return accuracy_from_logits(model.logits(batch), batch.answers)


def evaluate(model: PuzzleModel, instances: Sequence[PuzzleInstance]) -> float:
    """Fraction of instances whose predicted option is the gold one."""
    if not instances:
        raise InputError("cannot evaluate on an empty instance list")
    return evaluate_batch(model, model.encode(instances))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    instances: Sequence[PuzzleInstance],
    split: SplitSpec,
    model: PuzzleModel | None = None,
) -> TrainResult:
    """Fit on the train roots, keep the weights with the best validation accuracy.

    A fresh model (vocabulary built from the training split) is created unless
    one is supplied.  Shuffling is seeded by ``model_cfg.seed``.  With
    ``shuffle_options`` every drawn puzzle shows its five options in a fresh
    random order, the gold index following its option.
    """
    train_set, val_set, _ = split.partition(instances)
    if not train_set:
        raise InputError("training split is empty")
    if model is None:
        model = build_model(model_cfg, build_vocab(train_set, model_cfg.text_config.vocab_size))
    train_batch = model.encode(train_set)
    val_batch = model.encode(val_set) if val_set else None

    params = model.parameters()
    opt = AdamW(
        params, train_cfg.learning_rate, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps,
        train_cfg.weight_decay,
    )
    clamp = getattr(getattr(model, "head", None), "clamp", None)
    rng = np.random.default_rng(model_cfg.seed)
    n = len(train_batch)
    history: list[EpochMetrics] = []
    best_score, best_epoch = -math.inf, 0
    best_state = [p.data.copy() for p in params]
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            if train_cfg.shuffle_options:
                orders = [rng.permutation(5) for _ in idx]
                batch = model.encode_text([train_set[i] for i in idx], train_batch.patches[idx], orders)
            else:
                batch = train_batch.take(idx)
            model.zero_grad()
            with ad.Tape() as tape:
                loss = cross_entropy(model(batch), batch.answers)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            tape.backward(loss)
            clip_grad_norm(params, train_cfg.grad_clip_norm)
            lr = train_cfg.learning_rate
            if train_cfg.warmup_steps:
                lr *= min(1.0, (step + 1) / train_cfg.warmup_steps)
            opt.step(lr)
            if clamp is not None:
                clamp()
            losses.append(value * len(batch))
            step += 1
        train_loss = float(np.sum(losses) / n)
        val_acc = evaluate_batch(model, val_batch) if val_batch is not None else float("nan")
        history.append(EpochMetrics(epoch, train_loss, val_acc))
        log.info("epoch %d  train_loss %.4f  val_acc %.4f", epoch, train_loss, val_acc)
        score = val_acc if val_batch is not None else -train_loss
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = [p.data.copy() for p in params]
    for p, saved in zip(params, best_state):
        p.data = saved
    return TrainResult(model, save_checkpoint(model), history, best_epoch)
