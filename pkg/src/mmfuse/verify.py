"""Finite-difference sweeps over every differentiable op and whole models."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import synth_puzzles
from .head import cosine_scores, cross_entropy
from .layers import cross_attention
from .model import HeadKind, ModelConfig, build_model, build_vocab

GRAD_TOLERANCE = 1e-4


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    ids = np.array([[0, 3, 1], [2, 2, 4]])
    return {
        "add": (lambda a, b: a + b, [n(3, 4), n(4)]),
        "sub": (lambda a, b: a - b, [n(3, 1), n(3, 4)]),
        "mul": (lambda a, b: a * b, [n(2, 3), n(2, 3)]),
        "div": (lambda a, b: a / b, [n(2, 3), rng.uniform(0.5, 2.0, size=(2, 3))]),
        "exp": (ad.exp, [n(5)]),
        "sqrt": (ad.sqrt, [rng.uniform(0.5, 3.0, size=(4,))]),
        "tanh": (ad.tanh, [n(2, 5)]),
        "gelu": (ad.gelu, [n(3, 4)]),
        "sum": (lambda a: ad.sum_(a, axis=1, keepdims=True), [n(3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0), [n(3, 4)]),
        "reshape": (lambda a: ad.reshape(a, (6, 2)), [n(3, 4)]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [n(2, 3, 4)]),
        "swapaxes": (lambda a: ad.swapaxes(a, -1, -2), [n(2, 3, 4)]),
        "getitem": (lambda a: a[np.array([0, 2, 0]), 1:], [n(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n(2, 3), n(2, 2)]),
        "embedding": (lambda w: ad.embedding(w, ids), [n(5, 3)]),
        "matmul": (ad.matmul, [n(2, 3, 4), n(2, 4, 5)]),
        "linear": (ad.linear, [n(2, 3, 4), n(4, 5), n(5)]),
        "softmax": (ad.softmax, [n(3, 5)]),
        "log_softmax": (ad.log_softmax, [n(3, 5)]),
        "layer_norm": (ad.layer_norm, [n(3, 6), n(6), n(6)]),
        "cross_attention": (
            lambda q, kv, wq, wk, wv, wo: cross_attention(q, kv, np.array([1, 1, 0, 1]), 2, wq, wk, wv, wo),
            [n(3, 4), n(4, 4), n(4, 4), n(4, 4), n(4, 4), n(4, 4)],
        ),
        "cross_entropy": (lambda z: cross_entropy(z, np.array([1, 4])), [n(2, 5)]),
        "cosine": (cosine_scores, [n(2, 6), n(2, 5, 6)]),
    }


def op_grad_errors(seed: int = 0) -> dict[str, float]:
    """Worst relative gradient error of each op, on float64 random inputs.

    Non-scalar outputs are contracted with a fixed random weight tensor so
    every output element contributes to the checked gradient.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, (fn, arrays) in _op_cases(rng).items():
        inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
        with ad.no_grad():
            shape = fn(*inputs).shape
        weight = Tensor(rng.normal(size=shape))

        def loss(fn=fn, inputs=inputs, weight=weight):
            y = fn(*inputs)
            return (y * weight).sum() if y.ndim else y

        out[name] = ad.grad_check_many(loss, inputs)
    return out


def model_grad_error(
    head: HeadKind | str = HeadKind.Classification, max_coords: int | None = 4, seed: int = 0, **overrides
) -> float:
    """Gradient check of the cross-entropy loss of a tiny float64 model on two puzzles.

    Every parameter tensor is probed at ``max_coords`` random coordinates
    (all of them when ``None``).
    """
    instances = synth_puzzles(seed, 3, 1)[:2]
    cfg = ModelConfig(vision="tiny", text="tiny", head=head, precision="f64", seed=seed, **overrides)
    model = build_model(cfg, build_vocab(instances, cfg.text_config.vocab_size))
    # untrained LayerNorm/bias values sit at symmetric points; nudge them so
    # the check exercises generic parameter values
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        if p.ndim <= 1:
            p.data += rng.normal(0, 0.1, size=p.shape)
    batch = model.encode(instances)
    return ad.grad_check_many(
        lambda: cross_entropy(model(batch), batch.answers), model.parameters(), max_coords=max_coords, seed=seed
    )
