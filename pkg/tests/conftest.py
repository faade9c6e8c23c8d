import tempfile
from pathlib import Path

import numpy as np
import pytest

import config
from config import RuntimeSettings
from layers import bind
from models import ExperimentConfig
from schedule import build_schedule, interpolation_weights
from tensor import Rng, Tape

TINY = {
    "name": "tiny",
    "seed": 7,
    "corpus": {
        "signal_length": 64,
        "n_train": 4,
        "n_test": 2,
        "n_unseen": 1,
        "train_snrs": [0.0, 10.0],
        "unseen_snrs": [0.0, 5.0],
        "seen_families": ["white", "am_tone", "impulse_train"],
        "held_out_families": ["helicopter"],
    },
    "schedule": {"n_steps": 4, "betas": [0.1, 0.2, 0.3, 0.4]},
    "model": {
        "signal_length": 64,
        "frame_size": 16,
        "frame_hop": 8,
        "encoder_dim": 8,
        "encoder_blocks": 1,
        "encoder_ff": 16,
        "embedding_dim": 8,
        "n_classes": 3,
        "hidden": 8,
        "res_blocks": 2,
        "attn_dim": 4,
    },
    "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.01},
}


def tiny_config(**sections) -> ExperimentConfig:
    """The tiny experiment with section-level overrides."""
    return ExperimentConfig.model_validate(TINY).with_overrides(sections)


def random_schedule(rng: Rng, n_steps: int):
    betas = rng.uniform((n_steps,), 0.3, 0.5)
    alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - betas]))
    return build_schedule(n_steps, betas, interpolation_weights(alpha_bar))


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_param_gradients(loss_fn, params, names, rng: Rng, entries: int = 3, h: float = 1e-6):
    """Compare tape gradients of ``loss_fn(bound)`` with central differences.

    A few random entries of every named parameter are perturbed.
    """
    with Tape() as tape:
        bound = bind(params, tape, names)
        raw = tape.backward(loss_fn(bound))
    for name in names:
        analytic = raw[bound[name].node]
        flat = rng.integers(0, params[name].size, size=(entries,))
        for index in np.unique(flat):
            pos = np.unravel_index(int(index), params[name].shape)
            values = []
            for sign in (1.0, -1.0):
                shifted = dict(params)
                shifted[name] = params[name].copy()
                shifted[name][pos] += sign * h
                values.append(loss_fn(bind(shifted)).item())
            numeric = (values[0] - values[1]) / (2.0 * h)
            assert np.isclose(analytic[pos], numeric, rtol=1e-4, atol=1e-7), (name, pos)


@pytest.fixture
def tiny_cfg():
    """Tiny experiment config for fast end-to-end tests."""
    return tiny_config()


@pytest.fixture
def rng():
    """Fixed random stream."""
    return Rng(1234, "tests")


@pytest.fixture
def tiny_schedule():
    """T=4 schedule with betas 0.1..0.4 and default interpolation weights."""
    betas = np.array([0.1, 0.2, 0.3, 0.4])
    alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - betas]))
    return build_schedule(4, betas, interpolation_weights(alpha_bar))


@pytest.fixture
def tmp_dir():
    """Temporary directory removed after the test."""
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@pytest.fixture
def temp_log_file():
    """Temporary log file for testing."""
    with tempfile.NamedTemporaryFile(mode="w+", suffix=".jsonl", delete=False) as f:
        yield f.name
    Path(f.name).unlink(missing_ok=True)


@pytest.fixture
def runtime_settings(tmp_dir, monkeypatch):
    """Runtime settings pointing every output under the temporary directory."""
    settings = RuntimeSettings(
        output_dir=str(tmp_dir / "runs"), log_path=str(tmp_dir / "logs" / "runs.jsonl")
    )
    monkeypatch.setattr(config, "config", settings)
    return settings

