"""Multi-task optimisation of the denoiser and the noise conditioner."""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from conditioner import CLASSIFIER, ENCODER, encode, nc_loss, predicted_classes
from denoiser import Architecture, batch_diff_loss, init_model
from diffusion import forward_sample, sample_steps
from errors import DataError, NumericError, TrainingDivergedError
from layers import Params, bind
from models import EpochStats, ExperimentConfig, Phase, TrainConfig, TrainReport
from schedule import Schedule, schedule_from_spec
from tensor import Rng, Tape, add, backward, scale

logger = logging.getLogger(__name__)

RNG_STREAMS = ("data", "init", "diffusion-noise")


@dataclass
class TrainingSet:
    """In-memory training data: clean and noisy rows with noise labels."""

    x0: np.ndarray
    y: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x0.shape != self.y.shape or self.x0.ndim != 2:
            raise DataError(f"clean {self.x0.shape} and noisy {self.y.shape} must be (N, L)")
        if self.labels.shape != (self.x0.shape[0],):
            raise DataError(f"{self.labels.shape} labels for {self.x0.shape[0]} rows")

    def __len__(self) -> int:
        return self.x0.shape[0]

    def take(self, rows: np.ndarray) -> "TrainingSet":
        return TrainingSet(self.x0[rows], self.y[rows], self.labels[rows])


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class StepLosses:
    step: int
    total: float
    diff: Optional[float] = None
    nc: Optional[float] = None
    correct: int = 0
    count: int = 0
    grad_norm: float = 0.0


@dataclass
class TrainState:
    params: Params
    adam: AdamState
    rngs: Dict[str, Rng]
    step: int = 0
    epoch: int = 0


def adam_update(
    params: Params, grads: Dict[str, np.ndarray], state: AdamState, cfg: TrainConfig
) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam step on the names present in ``grads``.

    Returns new dictionaries; the inputs are not modified.
    """
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    updated = dict(params)
    c1 = 1.0 - cfg.beta1**step
    c2 = 1.0 - cfg.beta2**step
    for name, g in grads.items():
        m[name] = cfg.beta1 * m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * v.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
        updated[name] = params[name] - cfg.learning_rate * (m[name] / c1) / (
            np.sqrt(v[name] / c2) + cfg.adam_eps
        )
    return updated, AdamState(step, m, v)


def clip_by_global_norm(
    grads: Dict[str, np.ndarray], max_norm: Optional[float]
) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def trainable_names(params: Params, arch: Architecture, cfg: TrainConfig, phase: Phase) -> List[str]:
    """Parameters updated in ``phase``; a frozen encoder is excluded from joint training."""
    if phase is Phase.pretrain:
        return sorted(k for k in params if k.startswith((ENCODER, CLASSIFIER)))
    return sorted(
        k for k in params if not (cfg.freeze_encoder and k.startswith(ENCODER))
    )


def compute_gradients(
    params: Params,
    batch: TrainingSet,
    schedule: Schedule,
    arch: Architecture,
    cfg: TrainConfig,
    noise_rng: Rng,
    names: Sequence[str],
    phase: Phase = Phase.joint,
    step: int = 0,
) -> Tuple[Dict[str, np.ndarray], StepLosses]:
    """Gradients of L_diff + lambda_nc * L_nc (or L_nc alone when pretraining)."""
    ld = lnc = out = None
    try:
        with Tape() as tape:
            bound = bind(params, tape, names)
            if arch.use_conditioner:
                out = encode(bound, batch.y, arch.model)
                lnc = nc_loss(out, batch.labels)
            if phase is Phase.pretrain:
                total = lnc
            else:
                t = sample_steps(schedule, len(batch), noise_rng)
                sample = forward_sample(schedule, batch.x0, batch.y, t, noise_rng)
                emb = out.embedding if out is not None else None
                ld = batch_diff_loss(bound, sample.x_t, batch.y, t, emb, sample.target, arch)
                total = ld if lnc is None else add(ld, scale(lnc, cfg.lambda_nc))
            _check_divergence(total.item(), cfg, step, ld, lnc)
            raw = backward(total)
    except NumericError as e:
        raise TrainingDivergedError(
            f"step {step}: {e} (diff={_value(ld)}, nc={_value(lnc)})"
        )

    grads = {name: raw[bound[name].node] for name in names}
    losses = StepLosses(step, total.item(), _value(ld), _value(lnc))
    if out is not None:
        losses.correct = int(np.sum(predicted_classes(out) == batch.labels))
        losses.count = len(batch)
    return grads, losses


def _value(t) -> Optional[float]:
    return None if t is None else t.item()


def _check_divergence(total: float, cfg: TrainConfig, step: int, ld, lnc) -> None:
    if not np.isfinite(total) or total > cfg.divergence_threshold:
        raise TrainingDivergedError(
            f"step {step}: loss {total:.6g} diverged (diff={_value(ld)}, nc={_value(lnc)})"
        )


def train_step(
    state: TrainState,
    batch: TrainingSet,
    schedule: Schedule,
    arch: Architecture,
    cfg: TrainConfig,
    phase: Phase = Phase.joint,
) -> Tuple[TrainState, StepLosses]:
    """One clipped Adam step; parameters outside the trainable set are untouched."""
    names = trainable_names(state.params, arch, cfg, phase)
    grads, losses = compute_gradients(
        state.params,
        batch,
        schedule,
        arch,
        cfg,
        state.rngs["diffusion-noise"],
        names,
        phase,
        state.step,
    )
    grads, losses.grad_norm = clip_by_global_norm(grads, cfg.clip_norm)
    params, adam = adam_update(state.params, grads, state.adam, cfg)
    return TrainState(params, adam, state.rngs, state.step + 1, state.epoch), losses


def init_state(cfg: ExperimentConfig, arch: Optional[Architecture] = None) -> TrainState:
    arch = arch or Architecture.from_config(cfg)
    root = Rng(cfg.train.seed, "train")
    rngs = {name: root.child(name) for name in RNG_STREAMS}
    return TrainState(init_model(arch, rngs["init"]), AdamState(), rngs)


def _run_epoch(state, data, schedule, arch, cfg, phase) -> Tuple[TrainState, EpochStats]:
    started = time.perf_counter()
    order = state.rngs["data"].permutation(len(data))
    diff_sum = nc_sum = 0.0
    correct = seen = 0
    for start in range(0, len(data), cfg.batch_size):
        batch = data.take(order[start : start + cfg.batch_size])
        state, losses = train_step(state, batch, schedule, arch, cfg, phase)
        if losses.diff is not None:
            diff_sum += losses.diff * len(batch)
        if losses.nc is not None:
            nc_sum += losses.nc * len(batch)
        correct += losses.correct
        seen += losses.count

    state.epoch += 1
    stats = EpochStats(
        epoch=state.epoch,
        phase=phase,
        diff_loss=diff_sum / len(data) if phase is Phase.joint else None,
        nc_loss=nc_sum / len(data) if arch.use_conditioner else None,
        nc_accuracy=correct / seen if seen else None,
        wall_clock_s=time.perf_counter() - started,
    )
    return state, stats


def train(
    cfg: ExperimentConfig,
    dataset: TrainingSet,
    schedule: Optional[Schedule] = None,
    on_epoch: Optional[Callable[[EpochStats, TrainState], None]] = None,
    state: Optional[TrainState] = None,
) -> Tuple[Params, TrainReport]:
    """Optional NC pretraining followed by joint multi-task training."""
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if len(np.unique(dataset.labels)) < 2:
        raise DataError("training labels must cover at least 2 classes")

    schedule = schedule or schedule_from_spec(cfg.schedule)
    arch = Architecture.from_config(cfg, schedule)
    state = state or init_state(cfg, arch)
    tc = cfg.train
    report = TrainReport()

    phases: List[Tuple[Phase, int]] = []
    if tc.pretrain_nc and arch.use_conditioner and tc.pretrain_epochs > 0:
        phases.append((Phase.pretrain, tc.pretrain_epochs))
    phases.append((Phase.joint, tc.epochs))

    for phase, epochs in phases:
        logger.info(f"{phase.value}: {epochs} epochs over {len(dataset)} utterances")
        # each phase owns its optimiser moments
        state.adam = AdamState()
        for _ in range(epochs):
            state, stats = _run_epoch(state, dataset, schedule, arch, tc, phase)
            report.epochs.append(stats)
            logger.debug(f"epoch {stats.epoch} {phase.value}: diff={stats.diff_loss} nc={stats.nc_loss}")
            if on_epoch is not None:
                on_epoch(stats, state)
    return state.params, report
