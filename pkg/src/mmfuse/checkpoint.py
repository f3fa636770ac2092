"""Binary parameter container.

Layout: the 4-byte magic ``MMF1`` followed by one record per parameter, in
the model's parameter order::

    u32 name_len | name (UTF-8) | u32 rank | u32 dim * rank | f32 payload

All integers and floats are little-endian.  There is no trailer; the file
ends after the last record.
"""

from __future__ import annotations

import struct

import numpy as np

from .encoders import Vocabulary
from .errors import BadMagicError, CheckpointError, ShapeMismatchError, TruncatedCheckpointError
from .layers import Module
from .model import ModelConfig, PuzzleModel, build_model

MAGIC = b"MMF1"
_U32 = struct.Struct("<I")


def save_checkpoint(model: Module) -> bytes:
    parts = [MAGIC]
    for name, param in model.named_parameters():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(param.ndim))
        parts.extend(_U32.pack(d) for d in param.shape)
        parts.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    return b"".join(parts)


def read_records(data: bytes) -> list[tuple[str, np.ndarray]]:
    """Decode every record without reference to a model."""
    if data[:4] != MAGIC:
        raise BadMagicError(f"not an MMF1 checkpoint (magic {data[:4]!r})")
    pos = 4
    out = []

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = _U32.unpack(take(4, "name length"))
        try:
            name = take(n, "parameter name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"parameter name at byte {pos - n} is not UTF-8") from None
        (rank,) = _U32.unpack(take(4, f"rank of {name}"))
        dims = tuple(_U32.unpack(take(4, f"shape of {name}"))[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = take(4 * count, f"payload of {name}")
        out.append((name, np.frombuffer(payload, dtype="<f4").reshape(dims)))
    return out


def load_into(model: Module, data: bytes) -> Module:
    """Overwrite ``model``'s parameters from ``data`` after validating names and shapes."""
    params = dict(model.named_parameters())
    records = read_records(data)
    seen = set()
    for name, values in records:
        if name not in params:
            raise ShapeMismatchError(f"checkpoint parameter {name!r} does not exist in this model")
        if params[name].shape != values.shape:
            raise ShapeMismatchError(
                f"shape mismatch for {name!r}: checkpoint {values.shape}, model {params[name].shape}"
            )
        seen.add(name)
    missing = [n for n in params if n not in seen]
    if missing:
        raise ShapeMismatchError(f"checkpoint is missing parameters: {missing}")
    for name, values in records:
        param = params[name]
        param.data = values.astype(param.dtype)
        param.grad = None
    return model


def load_checkpoint(data: bytes, config: ModelConfig, vocab: Vocabulary) -> PuzzleModel:
    return load_into(build_model(config, vocab), data)
