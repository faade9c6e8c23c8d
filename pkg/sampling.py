"""Reverse-process inference from x_T ~ N(sqrt(abar_T) y, delta_T I) down to x_0."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from conditioner import encode
from denoiser import Architecture, predict_eps
from diffusion import target_from_state
from errors import SamplingError, StepRangeError
from layers import Params, bind
from models import SamplerConfig
from schedule import Schedule, derive_posterior
from tensor import Rng, Tensor

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class Enhancement:
    """Enhanced rows plus the conditioner outputs computed for them."""

    signal: np.ndarray
    embedding: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def step_sequence(n_steps: int, cfg: SamplerConfig) -> List[int]:
    """Retained steps, strictly decreasing from T and ending at 1."""
    if cfg.steps is not None:
        steps = list(cfg.steps)
        if steps[0] != n_steps:
            raise StepRangeError(f"retained steps must start at T={n_steps}, got {steps[0]}")
    else:
        steps = list(range(n_steps, 0, -cfg.stride))
        if steps[-1] != 1:
            steps.append(1)
    if steps[-1] != 1 or any(a <= b for a, b in zip(steps, steps[1:])):
        raise StepRangeError(f"steps {steps} are not strictly decreasing to 1")
    return steps


def network_predictor(params: Params, arch: Architecture, y: np.ndarray, emb: Optional[Tensor]) -> Predictor:
    bound = bind(params)

    def predict(x_t: np.ndarray, t: int) -> np.ndarray:
        return predict_eps(bound, x_t, y, t, emb, arch).data

    return predict


def oracle_predictor(schedule: Schedule, x0: np.ndarray) -> Predictor:
    """Returns the exact C_t given the true clean signal."""

    x0 = np.asarray(x0, dtype=np.float64)

    def predict(x_t: np.ndarray, t: int) -> np.ndarray:
        return target_from_state(schedule, x_t, x0.reshape(x_t.shape), t)

    return predict


def reverse_step(
    predictor: Predictor,
    schedule: Schedule,
    x_t: np.ndarray,
    y: np.ndarray,
    t: int,
    rng: Rng,
    cfg: SamplerConfig,
    prev: Optional[int] = None,
) -> np.ndarray:
    """Draw x_prev from N(c_xt x_t + c_yt y - c_eps C_hat, var).

    ``prev`` defaults to t - 1. The step into 0 has zero variance when the
    deterministic-last-step flag is on, else the forward transition variance.
    """
    t = schedule.check_step(t)
    prev = t - 1 if prev is None else prev
    c = derive_posterior(schedule, t, prev)
    mean = c.c_xt * x_t + c.c_yt * y - c.c_eps * predictor(x_t, t)
    if prev == 0:
        var = 0.0 if cfg.deterministic_last_step else c.var_step
    else:
        var = c.delta_tilde
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * rng.normal(mean.shape)


def enhance(
    params: Params,
    schedule: Schedule,
    y,
    cfg: SamplerConfig,
    arch: Architecture,
    predictor: Optional[Predictor] = None,
) -> Enhancement:
    """Run the reverse chain for one signal (L,) or a batch (B, L).

    The conditioner runs once per call; its embedding is reused at every step.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    rows = y[None, :] if single else y
    rng = Rng(0 if cfg.seed is None else cfg.seed, "sampling")

    emb = probs = None
    if arch.use_conditioner and predictor is None:
        out = encode(bind(params), rows, arch.model)
        emb, probs = out.embedding, out.probs.data
    predictor = predictor or network_predictor(params, arch, rows, emb)

    T = schedule.T
    x = math.sqrt(schedule.alpha_bar[T]) * rows + math.sqrt(schedule.delta[T]) * rng.normal(rows.shape)
    steps = step_sequence(T, cfg)
    for i, t in enumerate(steps):
        prev = steps[i + 1] if i + 1 < len(steps) else 0
        x = reverse_step(predictor, schedule, x, rows, t, rng, cfg, prev)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at reverse step {t}")

    return Enhancement(
        x[0] if single else x,
        None if emb is None else emb.data,
        probs,
    )
