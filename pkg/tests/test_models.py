from datetime import datetime

import pytest
from pydantic import ValidationError

from conftest import TINY, tiny_config
from models import (
    CorpusSpec,
    EpochStats,
    ExperimentConfig,
    InjectMode,
    LogEntry,
    ModelSpec,
    Phase,
    SamplerConfig,
    ScheduleSpec,
    TrainReport,
)


class TestExperimentConfig:
    def test_defaults_are_consistent(self):
        """Test the default config validates and seeds are inherited."""
        cfg = ExperimentConfig()
        assert cfg.model.n_classes == len(cfg.corpus.seen_families) == 10
        assert cfg.corpus.seed == cfg.train.seed == cfg.sampler.seed == 0

    def test_explicit_component_seed_kept(self):
        """Test an explicit component seed is not overwritten."""
        cfg = ExperimentConfig.model_validate({**TINY, "train": {**TINY["train"], "seed": 99}})
        assert cfg.train.seed == 99
        assert cfg.corpus.seed == 7

    def test_with_seed_resets_components(self, tiny_cfg):
        """Test with_seed propagates the new root seed."""
        cfg = tiny_cfg.with_seed(11)
        assert (cfg.seed, cfg.corpus.seed, cfg.train.seed, cfg.sampler.seed) == (11, 11, 11, 11)

    def test_with_overrides(self, tiny_cfg):
        """Test section overrides merge with existing values."""
        cfg = tiny_cfg.with_overrides({"train": {"inject": "concat"}})
        assert cfg.train.inject is InjectMode.concat
        assert cfg.train.epochs == tiny_cfg.train.epochs

    def test_extra_keys_rejected(self):
        """Test unknown keys fail validation."""
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"trian": {}})
        with pytest.raises(ValidationError):
            tiny_config(train={"learning_rat": 0.1})

    def test_class_count_must_match_families(self):
        """Test n_classes must equal the number of seen families."""
        with pytest.raises(ValidationError, match="n_classes"):
            tiny_config(model={"n_classes": 4})

    def test_signal_lengths_must_match(self):
        with pytest.raises(ValidationError):
            tiny_config(model={"signal_length": 128})

    def test_sampler_steps_within_chain(self):
        with pytest.raises(ValidationError):
            tiny_config(sampler={"steps": [6, 3, 1]})


class TestSections:
    def test_corpus_families(self):
        """Test family lists are validated."""
        with pytest.raises(ValidationError):
            CorpusSpec(seen_families=["white"], held_out_families=[])
        with pytest.raises(ValidationError):
            CorpusSpec(seen_families=["white", "pink"], held_out_families=["pink"])
        with pytest.raises(ValidationError):
            CorpusSpec(seen_families=["white", "white", "pink"])

    def test_snr_grid(self):
        with pytest.raises(ValidationError):
            CorpusSpec(train_snrs=[])
        with pytest.raises(ValidationError):
            CorpusSpec(unseen_snrs=[0.0, float("nan")])

    def test_schedule_lists(self):
        """Test explicit betas and weights must match n_steps."""
        with pytest.raises(ValidationError):
            ScheduleSpec(n_steps=3, betas=[0.1, 0.2])
        with pytest.raises(ValidationError):
            ScheduleSpec(n_steps=3, weights=[0.0, 0.5, 1.0])
        assert ScheduleSpec(n_steps=3, weights=[0.0, 0.3, 0.6, 1.0]).weights[-1] == 1.0

    def test_frame_fits_signal(self):
        with pytest.raises(ValidationError):
            ModelSpec(signal_length=16, frame_size=32)

    def test_sampler_steps(self):
        """Test retained steps must decrease strictly to 1."""
        assert SamplerConfig(steps=[5, 2, 1]).steps == [5, 2, 1]
        with pytest.raises(ValidationError):
            SamplerConfig(steps=[5, 2])
        with pytest.raises(ValidationError):
            SamplerConfig(steps=[5, 5, 1])
        with pytest.raises(ValidationError):
            SamplerConfig(stride=0)


class TestReports:
    def test_deterministic_view_drops_wall_clock(self):
        report = TrainReport(
            epochs=[EpochStats(epoch=1, phase=Phase.joint, diff_loss=0.5, wall_clock_s=1.5)]
        )
        (row,) = report.deterministic_view()
        assert "wall_clock_s" not in row
        assert row["diff_loss"] == 0.5

    def test_accuracy_bounds(self):
        with pytest.raises(ValidationError):
            EpochStats(epoch=1, phase=Phase.joint, nc_accuracy=1.5)


class TestLogEntry:
    def test_log_entry_creation(self):
        """Test log entry creation."""
        entry = LogEntry(run_id="r", command="train", event="start", payload={"seed": 3})
        assert isinstance(entry.timestamp, datetime)
        assert entry.payload["seed"] == 3

    def test_log_entry_serialization(self):
        """Test log entry can be serialized to JSON."""
        data = LogEntry(run_id="r", command="eval", event="done").model_dump(mode="json")
        assert set(data) == {"timestamp", "run_id", "command", "event", "payload"}
