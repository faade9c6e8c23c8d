"""Per-step constants of the interpolating diffusion chain.

The chain has marginals

    x_t = (1 - w_t) sqrt(abar_t) x_0 + w_t sqrt(abar_t) y + sqrt(delta_t) eps,

with delta_t = (1 - abar_t) - w_t^2 abar_t. Posterior coefficients come from
exact Gaussian conditioning of x_prev on x_t, rewritten in terms of the target
C_t through x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) C_t.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from errors import ScheduleError, StepRangeError
from models import ScheduleSpec

logger = logging.getLogger(__name__)

KAPPA_CEILING = 0.95
W_END_MIN = 0.99


@dataclass(frozen=True)
class PosteriorCoefficients:
    """Reverse-step mean c_xt*x_t + c_yt*y - c_eps*C and variance delta_tilde.

    ``var_step`` is the forward transition variance from the earlier step to t.
    """

    c_xt: float
    c_yt: float
    c_eps: float
    delta_tilde: float
    var_step: float


@dataclass(frozen=True, eq=False)
class Schedule:
    """Immutable schedule; every array has T+1 entries and index 0 is t = 0."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    beta_tilde: np.ndarray
    coeffs: Tuple[Optional[PosteriorCoefficients], ...]

    @property
    def vanilla(self) -> bool:
        return bool(np.all(self.w == 0.0))

    def mean_weights(self, t: int) -> Tuple[float, float]:
        """Coefficients (a_t, b_t) of x_0 and y in the step-t marginal mean."""
        root = math.sqrt(self.alpha_bar[t])
        return (1.0 - self.w[t]) * root, self.w[t] * root

    def check_step(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise StepRangeError(f"step {t} outside [1, {self.T}]")
        return int(t)

    def to_json(self) -> Dict[str, Any]:
        return {
            "n_steps": self.T,
            "beta": [float(v) for v in self.beta[1:]],
            "w": [float(v) for v in self.w],
            "alpha_bar": [float(v) for v in self.alpha_bar],
            "delta": [float(v) for v in self.delta],
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> "Schedule":
        try:
            return build_schedule(doc["n_steps"], doc["beta"], doc["w"])
        except (KeyError, TypeError) as e:
            raise ScheduleError(f"malformed schedule document: {e}")


def linear_betas(n_steps: int, start: float = 1e-4, end: float = 0.035) -> np.ndarray:
    return np.linspace(start, end, n_steps)


def interpolation_weights(alpha_bar: np.ndarray, kappa: Optional[float] = None) -> np.ndarray:
    """w_t = min(1, kappa * sqrt((1 - abar_t) / abar_t)) with w_T set to 1.

    Without an explicit ``kappa`` the largest gain keeping every a_t > 0 for
    t < T is used, capped at 0.95 so that delta stays well away from zero.
    """
    T = len(alpha_bar) - 1
    if kappa is None:
        end = alpha_bar[T]
        kappa = min(math.sqrt(end / (1.0 - end)), KAPPA_CEILING)
    ratio = np.sqrt((1.0 - alpha_bar) / alpha_bar)
    w = np.minimum(1.0, kappa * ratio)
    w[0] = 0.0
    w[T] = 1.0
    return w


def _transition(alpha_bar, w, delta, prev: int, t: int) -> PosteriorCoefficients:
    root_t = math.sqrt(alpha_bar[t])
    a_t, b_t = (1.0 - w[t]) * root_t, w[t] * root_t
    root_p = math.sqrt(alpha_bar[prev])
    a_p, b_p = (1.0 - w[prev]) * root_p, w[prev] * root_p
    d_t, d_p = delta[t], delta[prev]

    r = a_t / a_p
    s = b_t - r * b_p
    v = d_t - r * r * d_p
    if v < -1e-12 * d_t:
        raise ScheduleError(
            f"negative transition variance {v:.3e} from step {prev} to {t}"
        )
    v = max(v, 0.0)

    c_xt = v * a_p / (d_t * root_t) + r * d_p / d_t
    c_yt = (v * b_p - r * d_p * s) / d_t
    c_eps = v * a_p * math.sqrt(1.0 - alpha_bar[t]) / (d_t * root_t)
    return PosteriorCoefficients(c_xt, c_yt, c_eps, d_p * v / d_t, v)


def build_schedule(n_steps: int, betas: Sequence[float], weights: Sequence[float]) -> Schedule:
    """Validate the chain and precompute every per-step quantity.

    ``weights`` carries T+1 values starting with w_0 = 0.
    """
    T = int(n_steps)
    if T < 2:
        raise ScheduleError(f"need at least 2 steps, got {T}")
    b = np.asarray(betas, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).copy()
    if b.shape != (T,):
        raise ScheduleError(f"expected {T} betas, got shape {b.shape}")
    if w.shape != (T + 1,):
        raise ScheduleError(f"expected {T + 1} weights, got shape {w.shape}")
    if not (np.all(np.isfinite(b)) and np.all(b > 0.0) and np.all(b < 1.0)):
        raise ScheduleError("betas must lie strictly inside (0, 1)")
    if not np.all(np.isfinite(w)) or w[0] != 0.0:
        raise ScheduleError("w must be finite with w[0] = 0")
    if np.any(np.diff(w) < 0.0):
        raise ScheduleError(f"w is not non-decreasing: {w.tolist()}")
    if np.any(w > 1.0):
        raise ScheduleError("w must not exceed 1")

    vanilla = bool(np.all(w == 0.0))
    if not vanilla:
        if w[T] < W_END_MIN:
            raise ScheduleError(f"w[T]={w[T]:.4f} below {W_END_MIN}")
        if np.any(w[:T] >= 1.0):
            raise ScheduleError("w reaches 1 before the last step")

    beta = np.concatenate([[0.0], b])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    delta = (1.0 - alpha_bar) - w**2 * alpha_bar
    # delta within rounding of zero counts as infeasible
    bad = [t for t in range(1, T + 1) if not delta[t] > 1e-12 * (1.0 - alpha_bar[t])]
    if bad:
        t = bad[0]
        raise ScheduleError(
            f"schedule infeasible: delta[{t}]={delta[t]:.3e} <= 0 "
            f"(w grows too fast relative to alpha_bar decay)"
        )
    delta[0] = 0.0

    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]

    coeffs = [None] + [_transition(alpha_bar, w, delta, t - 1, t) for t in range(1, T + 1)]

    for arr in (beta, alpha, alpha_bar, w, delta, beta_tilde):
        arr.setflags(write=False)
    logger.debug(f"built schedule T={T} alpha_bar_T={alpha_bar[T]:.4f} vanilla={vanilla}")
    return Schedule(T, beta, alpha, alpha_bar, w, delta, beta_tilde, tuple(coeffs))


def derive_posterior(s: Schedule, t: int, prev: Optional[int] = None) -> PosteriorCoefficients:
    """Coefficients of the reverse step t -> prev (default t - 1)."""
    t = s.check_step(t)
    if prev is None or prev == t - 1:
        return s.coeffs[t]
    if not 0 <= prev < t:
        raise StepRangeError(f"earlier step {prev} must lie in [0, {t})")
    return _transition(s.alpha_bar, s.w, s.delta, prev, t)


def ddpm_mean(s: Schedule, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """Vanilla reverse mean (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)."""
    t = s.check_step(t)
    return (x_t - s.beta[t] / math.sqrt(1.0 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha[t])


def schedule_from_spec(spec: ScheduleSpec) -> Schedule:
    T = spec.n_steps
    betas = (
        np.asarray(spec.betas, dtype=np.float64)
        if spec.betas is not None
        else linear_betas(T, spec.beta_start, spec.beta_end)
    )
    if spec.weights is not None:
        weights = np.asarray(spec.weights, dtype=np.float64)
    elif spec.vanilla:
        weights = np.zeros(T + 1)
    else:
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - betas]))
        weights = interpolation_weights(alpha_bar, spec.kappa)
    return build_schedule(T, betas, weights)
