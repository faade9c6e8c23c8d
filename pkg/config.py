"""Configuration management for HushDiff."""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from errors import MissingFileError, SchemaError
from models import ExperimentConfig, InjectMode, SweepAxis


@dataclass
class RuntimeSettings:
    """Process-level settings, independent of any experiment."""

    output_dir: str = "runs"
    log_path: str = "logs/runs.jsonl"
    log_level: str = "INFO"
    threads: int = 1

    @classmethod
    def from_env(cls) -> "RuntimeSettings":
        """Create settings from environment variables."""
        return cls(
            output_dir=os.getenv("HUSHDIFF_OUTPUT_DIR", "runs"),
            log_path=os.getenv("HUSHDIFF_LOG_PATH", "logs/runs.jsonl"),
            log_level=os.getenv("HUSHDIFF_LOG_LEVEL", "INFO").upper(),
            threads=max(1, int(os.getenv("HUSHDIFF_THREADS", "1"))),
        )


# Global settings instance
config = RuntimeSettings.from_env()


def get_config() -> RuntimeSettings:
    """Get the current runtime settings."""
    return config


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read a JSON experiment config; defaults when no path is given."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config not found: {path}")
    try:
        return ExperimentConfig.model_validate(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {e}")
    except ValidationError as e:
        raise SchemaError(f"{path} does not match the experiment schema:\n{e}")


def write_resolved_config(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the fully resolved config (defaults included) next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


# Sweep settings: (name, section overrides) per ablation axis
SWEEP_SETTINGS: Dict[SweepAxis, Dict[str, Any]] = {
    SweepAxis.lambda_nc: {
        "description": "Weight of the noise-classification loss",
        "settings": [
            (f"lambda_nc={v:g}", {"train": {"lambda_nc": v}})
            for v in (0.0, 0.1, 0.3, 0.5, 1.0)
        ],
    },
    SweepAxis.inject: {
        "description": "How the noise embedding enters the denoiser",
        "settings": [
            (mode.value, {"train": {"inject": mode.value}}) for mode in InjectMode
        ],
    },
    SweepAxis.pretrain_freeze: {
        "description": "Encoder pretraining on noise classification and freezing",
        "settings": [
            ("no-PT", {"train": {"pretrain_nc": False, "freeze_encoder": False}}),
            ("PT+freeze", {"train": {"pretrain_nc": True, "freeze_encoder": True}}),
            ("PT", {"train": {"pretrain_nc": True, "freeze_encoder": False}}),
        ],
    },
    SweepAxis.conditioner: {
        "description": "Unconditioned baseline against the noise-conditioned model",
        "settings": [
            ("baseline", {"train": {"use_conditioner": False}}),
            ("conditioned", {"train": {"use_conditioner": True}}),
        ],
    },
}


def sweep_settings(axis: SweepAxis) -> List[tuple]:
    return list(SWEEP_SETTINGS[SweepAxis(axis)]["settings"])
