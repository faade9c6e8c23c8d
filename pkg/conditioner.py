"""Noise-classification encoder, classifier head and embedding injection.

Parameter names are prefixed ``encoder.`` and ``classifier.``; the injection
parameters live with the denoiser under the prefix the caller passes in.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from errors import InjectionError, LabelError, ShapeError
from layers import Bound, Params, glorot, layer_norm, linear, self_attention, sinusoidal_table
from models import InjectMode, ModelSpec
from tensor import (
    Rng,
    Tensor,
    add,
    add_scalar,
    as_tensor,
    broadcast,
    concat,
    exp,
    frame,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    sum_,
    take,
    tanh,
)

logger = logging.getLogger(__name__)

ENCODER = "encoder."
CLASSIFIER = "classifier."

BAND_FLOOR = 1e-3
POWER_FLOOR = 1e-12


@dataclass
class ConditionerOutput:
    """Embedding E(y) of shape (B, e) and class probabilities of shape (B, n)."""

    embedding: Tensor
    probs: Tensor


def n_frames(spec: ModelSpec) -> int:
    return 1 + (spec.signal_length - spec.frame_size) // spec.frame_hop


def init_conditioner(spec: ModelSpec, rng: Rng) -> Params:
    d, ff, e = spec.encoder_dim, spec.encoder_ff, spec.embedding_dim
    p: Params = {
        ENCODER + "frame_w": glorot(rng, spec.frame_size, d),
        ENCODER + "feat_w": glorot(rng, d, d),
        ENCODER + "feat_b": np.zeros(d),
    }
    for i in range(spec.encoder_blocks):
        blk = f"{ENCODER}block{i}."
        p[blk + "ln1_g"] = np.ones(d)
        p[blk + "ln1_b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[blk + name] = glorot(rng, d, d)
        p[blk + "ln2_g"] = np.ones(d)
        p[blk + "ln2_b"] = np.zeros(d)
        p[blk + "ff_w1"] = glorot(rng, d, ff)
        p[blk + "ff_b1"] = np.zeros(ff)
        p[blk + "ff_w2"] = glorot(rng, ff, d)
        p[blk + "ff_b2"] = np.zeros(d)
    p[ENCODER + "ln_g"] = np.ones(d)
    p[ENCODER + "ln_b"] = np.zeros(d)
    p[ENCODER + "pool_w"] = glorot(rng, d, e)
    p[ENCODER + "pool_b"] = np.zeros(e)
    p[CLASSIFIER + "w"] = glorot(rng, e, spec.n_classes)
    p[CLASSIFIER + "b"] = np.zeros(spec.n_classes)
    return p


def encode(params: Bound, y, spec: ModelSpec) -> ConditionerOutput:
    """Embed a batch of noisy signals (B, L) and classify their noise type.

    A single signal of shape (L,) is treated as a batch of one. Signals are
    scaled to unit RMS, framed and passed through a learned filter bank whose
    log band energies feed the attention blocks, so the embedding follows the
    spectral shape of y rather than its level.
    """
    y = as_tensor(y)
    if y.ndim == 1:
        y = reshape(y, (1, y.shape[0]))
    if y.ndim != 2 or y.shape[-1] != spec.signal_length:
        raise ShapeError(
            f"encode: expected signals of length {spec.signal_length}, got shape {y.shape}"
        )
    power = add_scalar(mean(mul(y, y), axis=-1, keepdims=True), POWER_FLOOR)
    y = mul(y, broadcast(exp(scale(log(power), -0.5)), y.shape))
    bands = matmul(frame(y, spec.frame_size, spec.frame_hop), params[ENCODER + "frame_w"])
    energy = log(add_scalar(mul(bands, bands), BAND_FLOOR))
    h = linear(energy, params[ENCODER + "feat_w"], params[ENCODER + "feat_b"])
    pos = Tensor(sinusoidal_table(n_frames(spec), spec.encoder_dim))
    h = add(h, broadcast(pos, h.shape))

    for i in range(spec.encoder_blocks):
        blk = f"{ENCODER}block{i}."
        a = layer_norm(h, params[blk + "ln1_g"], params[blk + "ln1_b"])
        h = add(h, self_attention(a, *(params[blk + n] for n in ("wq", "wk", "wv", "wo"))))
        f = layer_norm(h, params[blk + "ln2_g"], params[blk + "ln2_b"])
        f = tanh(linear(f, params[blk + "ff_w1"], params[blk + "ff_b1"]))
        f = linear(f, params[blk + "ff_w2"], params[blk + "ff_b2"])
        h = add(h, f)

    h = layer_norm(h, params[ENCODER + "ln_g"], params[ENCODER + "ln_b"])
    pooled = mean(h, axis=1)
    emb = linear(pooled, params[ENCODER + "pool_w"], params[ENCODER + "pool_b"])
    probs = softmax(linear(emb, params[CLASSIFIER + "w"], params[CLASSIFIER + "b"]), axis=-1)
    return ConditionerOutput(emb, probs)


def nc_loss(out: ConditionerOutput, labels) -> Tensor:
    """Mean cross-entropy -log probs[label] over the batch."""
    probs = out.probs
    if probs.ndim == 1:
        probs = reshape(probs, (1, probs.shape[0]))
    batch, n_classes = probs.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (batch,):
        raise ShapeError(f"nc_loss: {labels.shape[0]} labels for a batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise LabelError(f"labels {labels.tolist()} outside [0, {n_classes})")
    picked = take(reshape(probs, (batch * n_classes,)), np.arange(batch) * n_classes + labels)
    return scale(mean(log(picked)), -1.0)


def predicted_classes(out: ConditionerOutput) -> np.ndarray:
    return np.argmax(np.atleast_2d(out.probs.data), axis=-1)


# --- injection ---------------------------------------------------------------


def init_injection(mode: InjectMode, hidden: int, emb_dim: int, attn_dim: int, rng: Rng) -> Params:
    """Parameters for one injection site, keyed without prefix.

    Every mode starts as the identity on the hidden state: the addition and
    output projections are zero and the concat projection is [I; 0].
    """
    mode = InjectMode(mode)
    if mode is InjectMode.addition:
        return {"w": np.zeros((emb_dim, hidden))}
    if mode is InjectMode.concat:
        return {"w": np.eye(hidden + emb_dim, hidden), "b": np.zeros(hidden)}
    return {
        "wq": glorot(rng, hidden, attn_dim),
        "wk": glorot(rng, emb_dim, attn_dim),
        "wv": glorot(rng, emb_dim, attn_dim),
        "wo": np.zeros((attn_dim, hidden)),
    }


def inject(mode, hidden: Tensor, emb: Tensor, params: Bound, prefix: str) -> Tensor:
    """Fuse the embedding (B, e) into the hidden state (B, h).

    addition:   h + emb @ W
    concat:     [h, emb] @ W + b
    cross-attn: h + softmax(q k / sqrt(a)) v @ Wo with emb as the only key/value token
    """
    try:
        mode = InjectMode(mode)
    except ValueError:
        raise InjectionError(f"unknown injection mode {mode!r}")
    if hidden.ndim != 2 or emb.ndim != 2 or hidden.shape[0] != emb.shape[0]:
        raise InjectionError(f"cannot inject embedding {emb.shape} into hidden {hidden.shape}")
    try:
        if mode is InjectMode.addition:
            return add(hidden, matmul(emb, params[prefix + "w"]))
        if mode is InjectMode.concat:
            return linear(concat([hidden, emb], axis=-1), params[prefix + "w"], params[prefix + "b"])
        q = matmul(hidden, params[prefix + "wq"])
        k = matmul(emb, params[prefix + "wk"])
        v = matmul(emb, params[prefix + "wv"])
        scores = scale(sum_(mul(q, k), axis=-1, keepdims=True), 1.0 / math.sqrt(q.shape[-1]))
        weights = softmax(scores, axis=-1)
        attended = mul(broadcast(weights, v.shape), v)
        return add(hidden, matmul(attended, params[prefix + "wo"]))
    except KeyError as e:
        raise InjectionError(f"missing injection parameter {e} for mode {mode.value}")
    except ShapeError as e:
        raise InjectionError(f"incompatible widths for {mode.value} injection: {e}")

