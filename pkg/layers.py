"""Network building blocks composed from tape primitives."""

import math
from functools import lru_cache
from typing import Dict, Iterable, Optional

import numpy as np

from tensor import (
    Rng,
    Tape,
    Tensor,
    add,
    broadcast,
    exp,
    log,
    matmul,
    mean,
    mul,
    scale,
    softmax,
    sub,
    transpose,
)

Params = Dict[str, np.ndarray]
Bound = Dict[str, Tensor]


def glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.normal((fan_in, fan_out))


def bind(params: Params, tape: Optional[Tape] = None, trainable: Iterable[str] = ()) -> Bound:
    """Wrap a parameter set as tensors; names in ``trainable`` become tape leaves."""
    trainable = set(trainable)
    bound = {}
    for name, value in params.items():
        if tape is not None and name in trainable:
            bound[name] = tape.watch(value)
        else:
            bound[name] = Tensor(value)
    return bound


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return add(x, broadcast(b, x.shape))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else bias_add(out, b)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    mu = mean(x, axis=-1, keepdims=True)
    centred = sub(x, broadcast(mu, x.shape))
    var = mean(mul(centred, centred), axis=-1, keepdims=True)
    inv_std = exp(scale(log(var + eps), -0.5))
    normed = mul(centred, broadcast(inv_std, x.shape))
    return bias_add(mul(normed, broadcast(gain, x.shape)), bias)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over axis -2 of (B, F, d)."""
    q = matmul(x, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(matmul(softmax(scores, axis=-1), v), wo)


@lru_cache(maxsize=32)
def sinusoidal_table(rows: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, one row per index."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = pos * freqs[None, :]
    table = np.empty((rows, dim))
    table[:, 0::2] = np.sin(angles)[:, : (dim + 1) // 2]
    table[:, 1::2] = np.cos(angles)[:, : dim // 2]
    table.setflags(write=False)
    return table


def count_parameters(params: Params, prefix: str = "") -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(prefix)))
