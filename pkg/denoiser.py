"""The network predicting the combined-noise target C_t from (x_t, y, t, E(y)).

The trunk estimates the clean signal. That estimate is blended with the one
implied by x_t alone, weighted by how much each can be trusted at step t, and
the blend is converted to C_t through x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) C_t.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from conditioner import init_conditioner, init_injection, inject
from errors import ConfigError, ShapeError, StepRangeError
from layers import Bound, Params, count_parameters, glorot, linear, sinusoidal_table
from models import ExperimentConfig, InjectMode, ModelSpec
from schedule import Schedule, schedule_from_spec
from tensor import (
    Rng,
    Tensor,
    add,
    add_scalar,
    as_tensor,
    broadcast,
    concat,
    exp,
    l1,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sub,
    take,
    tanh,
)

logger = logging.getLogger(__name__)

DENOISER = "denoiser."

TIME_EMBED_SCALE = 0.1
GATE_POWER_INIT = 0.1
POWER_FLOOR = 1e-12
# spectral gains are stored divided by this so each optimiser step moves them further
GAIN_RATE = 10.0


@dataclass(frozen=True)
class Architecture:
    """What a parameter set was built for, including the schedule it is trained on."""

    model: ModelSpec
    inject: InjectMode
    use_conditioner: bool
    n_steps: int
    schedule: Schedule = field(compare=False, repr=False)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, schedule: Optional[Schedule] = None) -> "Architecture":
        schedule = schedule if schedule is not None else schedule_from_spec(cfg.schedule)
        if schedule.T != cfg.schedule.n_steps:
            raise ConfigError(
                f"schedule has {schedule.T} steps but the config asks for {cfg.schedule.n_steps}"
            )
        return cls(cfg.model, cfg.train.inject, cfg.train.use_conditioner, schedule.T, schedule)


def init_denoiser(arch: Architecture, rng: Rng) -> Params:
    """Trunk weights are drawn first and in a fixed order, so every injection
    mode (and the unconditioned network) shares them for a given seed.
    Injection sites draw from their own child streams.
    """
    m, h, L = arch.model, arch.model.hidden, arch.model.signal_length
    p: Params = {
        DENOISER + "in_w": glorot(rng, 2 * L, h),
        DENOISER + "in_b": np.zeros(h),
    }
    for k in range(m.res_blocks):
        blk = f"{DENOISER}block{k}."
        p[blk + "w"] = glorot(rng, h, h)
        p[blk + "b"] = np.zeros(h)
    p[DENOISER + "spec_gain"] = np.full(L // 2 + 1, 1.0 / GAIN_RATE)
    p[DENOISER + "out_w"] = np.zeros((h, L))
    p[DENOISER + "out_b"] = np.zeros(L)
    p[DENOISER + "log_rho"] = np.array([math.log(GATE_POWER_INIT)])
    if arch.use_conditioner:
        for k in range(m.res_blocks):
            site = init_injection(
                arch.inject, h, m.embedding_dim, m.attn_dim, rng.child(f"block{k}.inject")
            )
            p.update({f"{DENOISER}block{k}.inject.{name}": v for name, v in site.items()})
        p[DENOISER + "gate_w"] = np.zeros((m.embedding_dim, 1))
    return p


def init_model(arch: Architecture, rng: Rng) -> Params:
    """Full parameter set; the conditioner is included only when enabled."""
    params = init_denoiser(arch, rng.child("denoiser"))
    if arch.use_conditioner:
        params.update(init_conditioner(arch.model, rng.child("conditioner")))
    return params


def denoiser_parameter_count(params: Params) -> int:
    return count_parameters(params, DENOISER)


def time_table(n_steps: int, width: int) -> np.ndarray:
    """Fixed sinusoidal step embedding, row t for step t."""
    return TIME_EMBED_SCALE * sinusoidal_table(n_steps + 1, width)


@lru_cache(maxsize=8)
def dft_matrices(length: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Real DFT (L, K) and its inverse (K, L) as cosine and sine parts, K = L // 2 + 1.

    y @ fwd_cos and y @ fwd_sin are the real and imaginary rfft bins;
    re @ inv_cos + im @ inv_sin inverts them.
    """
    n = np.arange(length)[:, None]
    k = np.arange(length // 2 + 1)[None, :]
    angle = 2.0 * np.pi * n * k / length
    weight = np.full(k.shape, 2.0)
    weight[0, 0] = 1.0
    if length % 2 == 0:
        weight[0, -1] = 1.0
    mats = (
        np.cos(angle),
        -np.sin(angle),
        (weight * np.cos(angle)).T / length,
        (-weight * np.sin(angle)).T / length,
    )
    for m in mats:
        m.setflags(write=False)
    return mats


def spectral_filter(y: Tensor, gain: Tensor) -> Tensor:
    """Scale every rfft bin of the rows of y by ``gain`` (K,) and transform back."""
    fwd_cos, fwd_sin, inv_cos, inv_sin = (Tensor(m) for m in dft_matrices(y.shape[-1]))
    shape = (y.shape[0], fwd_cos.shape[1])
    g = broadcast(gain, shape)
    re = mul(matmul(y, fwd_cos), g)
    im = mul(matmul(y, fwd_sin), g)
    return add(matmul(re, inv_cos), matmul(im, inv_sin))


class StepConstants(NamedTuple):
    """Per-row schedule constants, each of shape (B, 1)."""

    root: np.ndarray  # sqrt(abar_t)
    inv_sig: np.ndarray  # 1 / sqrt(1 - abar_t)
    b: np.ndarray  # weight of y in the marginal mean
    snr: np.ndarray  # a_t^2 / delta_t
    k: np.ndarray  # a_t / delta_t


def _column(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


def step_constants(schedule: Schedule, steps: np.ndarray) -> StepConstants:
    abar = schedule.alpha_bar[steps]
    root = np.sqrt(abar)
    a = (1.0 - schedule.w[steps]) * root
    delta = schedule.delta[steps]
    return StepConstants(
        _column(root),
        _column(1.0 / np.sqrt(1.0 - abar)),
        _column(schedule.w[steps] * root),
        _column(a * a / delta),
        _column(a / delta),
    )


def _steps(t, batch: int, n_steps: int) -> np.ndarray:
    if batch == 0:
        raise ShapeError("empty batch")
    try:
        steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    except ValueError:
        raise ShapeError(f"steps of shape {np.shape(t)} do not match a batch of {batch}")
    if steps.min() < 1 or steps.max() > n_steps:
        raise StepRangeError(f"steps {np.unique(steps).tolist()} outside [1, {n_steps}]")
    return np.ascontiguousarray(steps)


def _rows(values: np.ndarray, shape) -> Tensor:
    return broadcast(Tensor(values), shape)


def predict_clean(
    params: Bound,
    x_t: Tensor,
    y: Tensor,
    steps: np.ndarray,
    emb: Optional[Tensor],
    arch: Architecture,
) -> Tensor:
    """Gated clean-signal estimate for a batch (B, L).

    The estimate D is a per-bin spectral gain on y plus the trunk output. The
    trunk sees inputs scaled by the RMS of y and its output is scaled back;
    a fresh model has D = y. D is mixed with (x_t - b_t y) / a_t with
    Wiener weights, using rho * mean((y - D)^2) as the power of D's error.
    """
    shape, batch = x_t.shape, x_t.shape[0]
    log_power = log(add_scalar(mean(mul(y, y), axis=-1, keepdims=True), POWER_FLOOR))
    inv_rms = broadcast(exp(scale(log_power, -0.5)), shape)
    rms = broadcast(exp(scale(log_power, 0.5)), shape)

    h = linear(
        concat([mul(x_t, inv_rms), mul(y, inv_rms)], axis=-1),
        params[DENOISER + "in_w"],
        params[DENOISER + "in_b"],
    )
    h = add(h, take(Tensor(time_table(arch.n_steps, arch.model.hidden)), steps))
    for k in range(arch.model.res_blocks):
        blk = f"{DENOISER}block{k}."
        if emb is not None:
            h = inject(arch.inject, h, emb, params, blk + "inject.")
        h = add(h, tanh(linear(h, params[blk + "w"], params[blk + "b"])))
    trunk = mul(linear(h, params[DENOISER + "out_w"], params[DENOISER + "out_b"]), rms)
    trunk = add(trunk, spectral_filter(y, scale(params[DENOISER + "spec_gain"], GAIN_RATE)))

    c = step_constants(arch.schedule, steps)
    log_rho = broadcast(reshape(params[DENOISER + "log_rho"], (1, 1)), (batch, 1))
    if emb is not None:
        log_rho = add(log_rho, matmul(emb, params[DENOISER + "gate_w"]))
    resid = sub(y, trunk)
    err_power = mul(exp(log_rho), mean(mul(resid, resid), axis=-1, keepdims=True))
    keep = exp(scale(log(add_scalar(mul(err_power, Tensor(c.snr)), 1.0)), -1.0))
    x_gain = mul(mul(err_power, Tensor(c.k)), keep)
    from_x = sub(x_t, mul(_rows(c.b, shape), y))
    return add(mul(broadcast(x_gain, shape), from_x), mul(broadcast(keep, shape), trunk))


def predict_eps(
    params: Bound,
    x_t,
    y,
    t: Union[int, np.ndarray],
    emb: Optional[Tensor],
    arch: Architecture,
) -> Tensor:
    """Predict C_t for a batch (B, L); ``emb`` is None for the unconditioned network."""
    x_t, y = as_tensor(x_t), as_tensor(y)
    if x_t.shape != y.shape or x_t.ndim != 2 or x_t.shape[1] != arch.model.signal_length:
        raise ShapeError(
            f"predict_eps: x_t {x_t.shape} and y {y.shape} must both be "
            f"(B, {arch.model.signal_length})"
        )
    steps = _steps(t, x_t.shape[0], arch.n_steps)
    x0 = predict_clean(params, x_t, y, steps, emb, arch)
    c = step_constants(arch.schedule, steps)
    residual = sub(x_t, mul(_rows(c.root, x_t.shape), x0))
    return mul(_rows(c.inv_sig, x_t.shape), residual)


def diff_loss(prediction, target) -> Tensor:
    """Mean absolute error over batch and signal length."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.size == 0 or target.size == 0:
        raise ShapeError("diff_loss: empty batch")
    return l1(prediction, target)


def batch_diff_loss(
    params: Bound, x_t, y, t, emb: Optional[Tensor], target, arch: Architecture
) -> Tensor:
    """L1 between the network prediction and the target for one batch."""
    if np.size(t) == 0 or as_tensor(x_t).size == 0:
        raise ShapeError("diff_loss: empty batch")
    return diff_loss(predict_eps(params, x_t, y, t, emb, arch), target)
