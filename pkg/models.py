"""Pydantic models for HushDiff configs, manifests and reports."""

import math
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_SEEN_FAMILIES = [
    "white",
    "pink",
    "band",
    "am_tone",
    "fm_tone",
    "impulse_train",
    "chirp",
    "two_tone_beat",
    "gated_bursts",
    "babble",
]
DEFAULT_HELD_OUT_FAMILIES = ["helicopter", "baby_cry", "crowd_party"]


class InjectMode(str, Enum):
    """Ways of delivering the noise embedding into the denoiser."""

    addition = "addition"
    concat = "concat"
    cross_attn = "cross-attn"


class SweepAxis(str, Enum):
    """Ablation axes run by the sweep command."""

    lambda_nc = "lambda_nc"
    inject = "inject"
    pretrain_freeze = "pretrain-freeze"
    conditioner = "conditioner"


class Phase(str, Enum):
    pretrain = "pretrain"
    joint = "joint"


class Split(str, Enum):
    train = "train"
    test = "test"
    unseen = "unseen"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- configuration -----------------------------------------------------------


class CorpusSpec(_Strict):
    """Synthetic corpus layout: families, SNR grids and counts."""

    signal_length: int = Field(256, ge=16, description="Samples per utterance")
    sample_rate: int = Field(16000, gt=0, description="Nominal rate, metadata only")
    n_train: int = Field(64, ge=1, description="Training utterances per seen family")
    n_test: int = Field(8, ge=1, description="Test utterances per seen family")
    n_unseen: int = Field(
        4, ge=1, description="Utterances per held-out family and unseen SNR"
    )
    train_snrs: List[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0])
    unseen_snrs: List[float] = Field(
        default_factory=lambda: [-5.0, 0.0, 5.0, 10.0, 15.0]
    )
    seen_families: List[str] = Field(
        default_factory=lambda: list(DEFAULT_SEEN_FAMILIES)
    )
    held_out_families: List[str] = Field(
        default_factory=lambda: list(DEFAULT_HELD_OUT_FAMILIES)
    )
    seed: Optional[int] = Field(None, ge=0, lt=2**64)

    @field_validator("train_snrs", "unseen_snrs")
    @classmethod
    def finite_snrs(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("SNR grid must not be empty")
        if not all(math.isfinite(s) for s in v):
            raise ValueError("SNR values must be finite")
        return v

    @field_validator("seen_families", "held_out_families")
    @classmethod
    def unique_families(cls, v: List[str]) -> List[str]:
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate noise families in {v}")
        return v

    @model_validator(mode="after")
    def disjoint_families(self) -> "CorpusSpec":
        if len(self.seen_families) < 2:
            raise ValueError("at least 2 seen noise families are required")
        overlap = set(self.seen_families) & set(self.held_out_families)
        if overlap:
            raise ValueError(f"held-out families overlap seen families: {sorted(overlap)}")
        return self


class ScheduleSpec(_Strict):
    """Diffusion chain settings.

    ``vanilla`` forces w = 0 everywhere. Explicit ``betas``/``weights`` lists
    override the generated curves (``weights`` has T+1 entries, w[0] first).
    """

    n_steps: int = Field(50, ge=2, description="Number of diffusion steps T")
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.035, gt=0.0, lt=1.0)
    vanilla: bool = False
    kappa: Optional[float] = Field(
        None, gt=0.0, description="Interpolation gain; derived from the chain when unset"
    )
    betas: Optional[List[float]] = None
    weights: Optional[List[float]] = None

    @model_validator(mode="after")
    def explicit_lengths(self) -> "ScheduleSpec":
        if self.betas is not None and len(self.betas) != self.n_steps:
            raise ValueError(f"betas must have {self.n_steps} entries")
        if self.weights is not None and len(self.weights) != self.n_steps + 1:
            raise ValueError(f"weights must have {self.n_steps + 1} entries")
        return self


class ModelSpec(_Strict):
    """Network widths for the encoder, classifier and denoiser."""

    signal_length: int = Field(256, ge=16)
    frame_size: int = Field(32, ge=2)
    frame_hop: int = Field(16, ge=1)
    encoder_dim: int = Field(64, ge=2)
    encoder_blocks: int = Field(2, ge=1)
    encoder_ff: int = Field(128, ge=1)
    embedding_dim: int = Field(64, ge=1)
    n_classes: int = Field(10, ge=2)
    hidden: int = Field(64, ge=2)
    res_blocks: int = Field(4, ge=1)
    attn_dim: int = Field(16, ge=1, description="Cross-attention key width")

    @model_validator(mode="after")
    def frame_fits(self) -> "ModelSpec":
        if self.frame_size > self.signal_length:
            raise ValueError("frame_size exceeds signal_length")
        return self


class TrainConfig(_Strict):
    """Multi-task optimisation settings."""

    lambda_nc: float = Field(0.3, ge=0.0, description="Weight of the NC loss")
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    clip_norm: Optional[float] = Field(1.0, gt=0.0)
    pretrain_nc: bool = False
    pretrain_epochs: int = Field(5, ge=0)
    freeze_encoder: bool = False
    inject: InjectMode = InjectMode.addition
    use_conditioner: bool = True
    divergence_threshold: float = Field(1e6, gt=0.0)
    checkpoint_every: int = Field(0, ge=0, description="Epoch interval, 0 = final only")
    seed: Optional[int] = Field(None, ge=0, lt=2**64)


class SamplerConfig(_Strict):
    """Reverse-process settings."""

    steps: Optional[List[int]] = Field(
        None, description="Explicit retained steps, strictly decreasing, ending at 1"
    )
    stride: int = Field(1, ge=1, description="Keep every n-th step when steps is unset")
    deterministic_last_step: bool = True
    seed: Optional[int] = Field(None, ge=0, lt=2**64)

    @field_validator("steps")
    @classmethod
    def decreasing_to_one(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is None:
            return v
        if not v or v[-1] != 1:
            raise ValueError("steps must end at 1")
        if any(a <= b for a, b in zip(v, v[1:])):
            raise ValueError("steps must be strictly decreasing")
        return v


class MetricOptions(_Strict):
    seg_frame: int = Field(32, ge=1)
    seg_hop: int = Field(16, ge=1)
    seg_floor_db: float = -10.0
    seg_ceiling_db: float = 35.0
    sdr_clamp_db: float = Field(100.0, gt=0.0)


class ExperimentConfig(_Strict):
    """Every knob of a run. Component seeds left unset inherit ``seed``."""

    name: str = Field("hushdiff", min_length=1)
    seed: int = Field(0, ge=0, lt=2**64)
    corpus: CorpusSpec = Field(default_factory=CorpusSpec)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    metrics: MetricOptions = Field(default_factory=MetricOptions)

    @model_validator(mode="after")
    def consistent(self) -> "ExperimentConfig":
        if self.model.n_classes != len(self.corpus.seen_families):
            raise ValueError(
                f"model.n_classes={self.model.n_classes} but corpus has "
                f"{len(self.corpus.seen_families)} seen families"
            )
        if self.model.signal_length != self.corpus.signal_length:
            raise ValueError("model.signal_length must equal corpus.signal_length")
        if self.sampler.steps and self.sampler.steps[0] > self.schedule.n_steps:
            raise ValueError("sampler.steps exceeds schedule.n_steps")
        for part in (self.corpus, self.train, self.sampler):
            if part.seed is None:
                part.seed = self.seed
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with a new root seed that every component inherits."""
        data = self.model_dump(mode="json")
        data["seed"] = seed
        for part in ("corpus", "train", "sampler"):
            data[part]["seed"] = None
        return ExperimentConfig.model_validate(data)

    def with_overrides(self, overrides: Dict[str, Dict[str, Any]]) -> "ExperimentConfig":
        """Copy with section-level overrides, e.g. ``{"train": {"lambda_nc": 0.1}}``."""
        data = self.model_dump(mode="json")
        for section, values in overrides.items():
            data[section] = {**data[section], **values}
        return ExperimentConfig.model_validate(data)


# --- corpus ------------------------------------------------------------------


class ManifestRecord(BaseModel):
    """One utterance: clean/noisy file pair plus its label and SNR."""

    id: str
    split: Split
    family: str
    label: int = Field(..., ge=0, description="Class index; held-out families follow seen ones")
    snr_db: float
    seed: int = Field(..., ge=0)
    stationary: bool
    clean_path: str
    noisy_path: str


class CorpusManifest(BaseModel):
    version: int = 1
    signal_length: int
    sample_rate: int
    seed: int
    classes: List[str] = Field(..., description="Seen families in label order")
    held_out: List[str] = Field(default_factory=list)
    records: List[ManifestRecord] = Field(default_factory=list)

    def split(self, name: Split) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]


# --- training ----------------------------------------------------------------


class EpochStats(BaseModel):
    """Per-epoch training record."""

    epoch: int = Field(..., ge=1)
    phase: Phase
    diff_loss: Optional[float] = None
    nc_loss: Optional[float] = None
    nc_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    wall_clock_s: float = Field(0.0, ge=0.0)


class TrainReport(BaseModel):
    epochs: List[EpochStats] = Field(default_factory=list)

    def deterministic_view(self) -> List[Dict[str, Any]]:
        """Epoch records without the wall-clock column."""
        return [e.model_dump(exclude={"wall_clock_s"}) for e in self.epochs]


# --- evaluation --------------------------------------------------------------


class UtteranceScore(BaseModel):
    id: str
    system: str
    family: str
    label: int
    snr_db: float
    si_sdr: float
    seg_snr: float
    predicted_label: Optional[int] = None


class EvalCell(BaseModel):
    """Mean scores of one system on one (family, SNR) cell."""

    system: str
    family: str
    snr_db: float
    si_sdr: float
    seg_snr: float
    count: int = Field(..., ge=1)
    stationary: Optional[bool] = None


class EvalReport(BaseModel):
    cells: List[EvalCell] = Field(default_factory=list)
    nc_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    separability: Optional[float] = Field(None, ge=-1.0, le=1.0)
    intra_similarity: Optional[float] = Field(None, description="Mean within-class cosine similarity")
    inter_similarity: Optional[float] = Field(None, description="Mean across-class cosine similarity")


class SweepRow(BaseModel):
    """One setting of an ablation sweep, averaged over its seeds."""

    setting: str
    overrides: Dict[str, Dict[str, Any]]
    seeds: List[int]
    nc_accuracy: Optional[float] = None
    si_sdr_input: float
    si_sdr_test: float
    si_sdr_unseen: float
    seg_snr_test: float


# --- logging / persistence ---------------------------------------------------


class LogEntry(BaseModel):
    """Model for JSONL run-log entries."""

    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    run_id: str
    command: str
    event: str
    payload: Dict[str, Any] = Field(default_factory=dict)


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Index of the first float in the data block")


class CheckpointHeader(BaseModel):
    version: int
    epoch: int = Field(..., ge=0)
    config: Dict[str, Any]
    schedule: Dict[str, Any]
    tensors: List[TensorEntry]
    rng_states: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
