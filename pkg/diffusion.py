"""Forward sampling q(x_t | x_0, y) and the combined-noise training target."""

from dataclasses import dataclass
from typing import Union

import numpy as np

from errors import ShapeError, StepRangeError
from schedule import Schedule
from tensor import Rng

Steps = Union[int, np.ndarray]


@dataclass
class DiffusionSample:
    t: Steps
    x_t: np.ndarray
    eps: np.ndarray
    target: np.ndarray


def _steps(s: Schedule, t: Steps, batch_shape) -> Steps:
    if np.ndim(t) == 0:
        return s.check_step(int(t))
    t = np.asarray(t, dtype=np.int64)
    if t.shape != tuple(batch_shape[:1]):
        raise ShapeError(f"per-row steps need shape {batch_shape[:1]}, got {t.shape}")
    if t.size and (t.min() < 1 or t.max() > s.T):
        raise StepRangeError(f"steps {t.tolist()} outside [1, {s.T}]")
    return t


def _at(values: np.ndarray, t: Steps, ndim: int):
    """values[t] as a scalar, or as a column broadcasting over rows."""
    if np.ndim(t) == 0:
        return float(values[t])
    return values[t].reshape((-1,) + (1,) * (ndim - 1))


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"signal shapes differ: {[a.shape for a in arrays]}")


def forward_sample(s: Schedule, x0, y, t: Steps, rng: Rng) -> DiffusionSample:
    """Draw x_t from the step-t marginal; ``t`` may be one step or one per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x0, y)
    t = _steps(s, t, x0.shape)
    eps = rng.normal(x0.shape)
    root = np.sqrt(_at(s.alpha_bar, t, x0.ndim))
    w = _at(s.w, t, x0.ndim)
    x_t = (1.0 - w) * root * x0 + w * root * y + np.sqrt(_at(s.delta, t, x0.ndim)) * eps
    return DiffusionSample(t, x_t, eps, build_target(s, x0, y, eps, t))


def build_target(s: Schedule, x0, y, eps, t: Steps) -> np.ndarray:
    """C_t = w_t sqrt(abar_t)/sqrt(1-abar_t) (y - x0) + sqrt(delta_t)/sqrt(1-abar_t) eps."""
    x0, y, eps = (np.asarray(a, dtype=np.float64) for a in (x0, y, eps))
    _same_shape(x0, y, eps)
    t = _steps(s, t, x0.shape)
    abar = _at(s.alpha_bar, t, x0.ndim)
    denom = np.sqrt(1.0 - abar)
    residual = _at(s.w, t, x0.ndim) * np.sqrt(abar) / denom
    return residual * (y - x0) + np.sqrt(_at(s.delta, t, x0.ndim)) / denom * eps


def recover_noise(s: Schedule, x_t, x0, y, t: Steps) -> np.ndarray:
    """Invert the marginal identity to get back the eps that produced x_t."""
    x_t, x0, y = (np.asarray(a, dtype=np.float64) for a in (x_t, x0, y))
    _same_shape(x_t, x0, y)
    t = _steps(s, t, x0.shape)
    root = np.sqrt(_at(s.alpha_bar, t, x0.ndim))
    w = _at(s.w, t, x0.ndim)
    return (x_t - (1.0 - w) * root * x0 - w * root * y) / np.sqrt(_at(s.delta, t, x0.ndim))


def target_from_state(s: Schedule, x_t, x0, t: Steps) -> np.ndarray:
    """The C_t consistent with x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) C_t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    _same_shape(x_t, x0)
    t = _steps(s, t, x0.shape)
    abar = _at(s.alpha_bar, t, x0.ndim)
    return (x_t - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)


def sample_steps(s: Schedule, n: int, rng: Rng) -> np.ndarray:
    """Training steps drawn uniformly from 1..T."""
    return rng.integers(1, s.T + 1, size=(n,))
