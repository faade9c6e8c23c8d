import numpy as np
import pytest

from conditioner import encode
from conftest import check_param_gradients, tiny_config
from denoiser import (
    DENOISER,
    Architecture,
    batch_diff_loss,
    denoiser_parameter_count,
    diff_loss,
    init_model,
    predict_clean,
    predict_eps,
    spectral_filter,
    step_constants,
    time_table,
)
from errors import ConfigError, ShapeError, StepRangeError
from layers import bind
from models import ExperimentConfig, InjectMode
from tensor import Rng, Tensor


def tiny_arch(mode=InjectMode.addition, use_conditioner=True) -> Architecture:
    cfg = tiny_config(train={"inject": InjectMode(mode).value, "use_conditioner": use_conditioner})
    return Architecture.from_config(cfg)


class TestParameterBudget:
    @pytest.mark.parametrize(
        "mode, expected",
        [("addition", 82_690), ("concat", 99_330), ("cross-attn", 82_690)],
    )
    def test_default_denoiser_size(self, mode, expected):
        """The default denoiser stays under 100k parameters in every mode."""
        cfg = ExperimentConfig().with_overrides({"train": {"inject": mode}})
        params = init_model(Architecture.from_config(cfg), Rng(0))
        assert denoiser_parameter_count(params) == expected
        assert expected <= 100_000

    def test_unconditioned_model_has_no_conditioner(self):
        params = init_model(tiny_arch(use_conditioner=False), Rng(0))
        assert all(k.startswith(DENOISER) for k in params)
        assert not any(".inject." in k for k in params)


class TestPredictEps:
    @pytest.mark.parametrize("mode", list(InjectMode))
    def test_output_shape(self, mode, rng):
        arch = tiny_arch(mode)
        params = bind(init_model(arch, Rng(1)))
        y = rng.normal((3, 64))
        emb = encode(params, y, arch.model).embedding
        out = predict_eps(params, rng.normal((3, 64)), y, np.array([1, 2, 4]), emb, arch)
        assert out.shape == (3, 64)

    def test_unconditioned(self, rng):
        arch = tiny_arch(use_conditioner=False)
        params = bind(init_model(arch, Rng(1)))
        out = predict_eps(params, rng.normal((2, 64)), rng.normal((2, 64)), 3, None, arch)
        assert out.shape == (2, 64)

    def test_embedding_changes_prediction(self, rng):
        arch = tiny_arch()
        params = init_model(arch, Rng(2))
        for name in params:
            if name.startswith(DENOISER):
                params[name] = params[name] + 0.3 * rng.normal(params[name].shape)
        params = bind(params)
        x_t, y = rng.normal((1, 64)), rng.normal((1, 64))
        a = predict_eps(params, x_t, y, 2, Tensor(np.zeros((1, 8))), arch)
        b = predict_eps(params, x_t, y, 2, Tensor(np.ones((1, 8))), arch)
        assert not np.allclose(a.data, b.data)

    def test_step_out_of_range(self, rng):
        arch = tiny_arch(use_conditioner=False)
        params = bind(init_model(arch, Rng(1)))
        with pytest.raises(StepRangeError):
            predict_eps(params, np.zeros((1, 64)), np.zeros((1, 64)), 5, None, arch)

    def test_shape_mismatch(self):
        arch = tiny_arch(use_conditioner=False)
        params = bind(init_model(arch, Rng(1)))
        with pytest.raises(ShapeError):
            predict_eps(params, np.zeros((1, 64)), np.zeros((1, 63)), 1, None, arch)
        with pytest.raises(ShapeError):
            predict_eps(params, np.zeros((2, 64)), np.zeros((2, 64)), np.array([1, 2, 3]), None, arch)

    def test_empty_batch(self):
        arch = tiny_arch(use_conditioner=False)
        params = bind(init_model(arch, Rng(1)))
        with pytest.raises(ShapeError):
            batch_diff_loss(params, np.zeros((0, 64)), np.zeros((0, 64)), np.zeros(0, dtype=int), None, np.zeros((0, 64)), arch)


class TestDiffLoss:
    def test_mean_absolute_error(self):
        pred = np.array([[1.0, -1.0], [0.5, 0.0]])
        target = np.zeros((2, 2))
        assert diff_loss(pred, target).item() == pytest.approx(0.625)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            diff_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestDenoiserGradients:
    @pytest.mark.parametrize("mode", list(InjectMode))
    @pytest.mark.parametrize("point", range(5))
    def test_every_parameter(self, mode, point):
        """Denoiser, injection and encoder gradients through the L1 loss."""
        arch = tiny_arch(mode)
        rng = Rng(point, f"denoiser-grad-{mode.value}")
        params = init_model(arch, rng.child("init"))
        # move zero-initialised weights so every path carries gradient
        for name in params:
            if name.startswith(DENOISER):
                params[name] = params[name] + 0.3 * rng.normal(params[name].shape)
        x_t, y = rng.normal((3, 64)), rng.normal((3, 64))
        target = rng.normal((3, 64))
        t = np.array([1, 3, 4])

        def loss(bound):
            emb = encode(bound, y, arch.model).embedding
            return batch_diff_loss(bound, x_t, y, t, emb, target, arch)

        check_param_gradients(loss, params, sorted(params), rng.child("entries"), entries=2)


class TestInitialisation:
    def test_trunk_is_shared_across_modes(self):
        """Only the injection path differs between ablations built from one seed."""
        base = init_model(tiny_arch(use_conditioner=False), Rng(5))
        for mode in InjectMode:
            params = init_model(tiny_arch(mode), Rng(5))
            for name, value in base.items():
                assert np.array_equal(params[name], value), (mode, name)

    def test_injection_sites_use_their_own_streams(self):
        a = init_model(tiny_arch("cross-attn"), Rng(5))
        b = init_model(tiny_arch("cross-attn"), Rng(5))
        key = DENOISER + "block0.inject.wq"
        assert np.array_equal(a[key], b[key])
        assert not np.array_equal(a[key], a[DENOISER + "block1.inject.wq"])

    def test_fresh_model_ignores_the_embedding(self, rng):
        arch = tiny_arch("concat")
        params = bind(init_model(arch, Rng(3)))
        x_t, y = rng.normal((2, 64)), rng.normal((2, 64))
        a = predict_eps(params, x_t, y, 2, Tensor(np.zeros((2, 8))), arch)
        b = predict_eps(params, x_t, y, 2, Tensor(rng.normal((2, 8))), arch)
        assert np.allclose(a.data, b.data, rtol=0.0, atol=1e-12)


class TestUnconditionedEquivalence:
    def test_zero_embedding_addition_matches_unconditioned(self, rng):
        """Addition with E = 0 gives bit-identical predictions to the plain network."""
        cond = tiny_arch("addition")
        plain = tiny_arch(use_conditioner=False)
        params = init_model(cond, Rng(4))
        for name in params:
            if name.startswith(DENOISER):
                params[name] = params[name] + 0.3 * rng.normal(params[name].shape)
        shared = {k: v for k, v in params.items() if k in init_model(plain, Rng(4))}
        x_t, y = rng.normal((3, 64)), rng.normal((3, 64))
        t = np.array([1, 2, 4])
        with_emb = predict_eps(bind(params), x_t, y, t, Tensor(np.zeros((3, 8))), cond)
        without = predict_eps(bind(shared), x_t, y, t, None, plain)
        assert np.array_equal(with_emb.data, without.data)


class TestTimeTable:
    def test_rows_are_distinct(self):
        table = time_table(50, 64)
        rows = table[1:]
        gaps = np.linalg.norm(rows[:, None, :] - rows[None, :, :], axis=-1)
        assert np.all(gaps[~np.eye(50, dtype=bool)] > 1e-6)

    def test_shape(self):
        assert time_table(4, 8).shape == (5, 8)


class TestCleanEstimate:
    def test_fresh_model_returns_the_noisy_input(self, rng):
        """A fresh network estimates x_0 = y at every step."""
        arch = tiny_arch(use_conditioner=False)
        params = bind(init_model(arch, Rng(6)))
        x_t, y = rng.normal((2, 64)), rng.normal((2, 64))
        steps = np.array([1, arch.n_steps])
        x0 = predict_clean(params, Tensor(x_t), Tensor(y), steps, None, arch)
        assert np.allclose(x0.data, y, atol=1e-9)
        out = predict_eps(params, x_t, y, steps, None, arch)
        root = np.sqrt(arch.schedule.alpha_bar[steps])[:, None]
        sig = np.sqrt(1.0 - arch.schedule.alpha_bar[steps])[:, None]
        assert np.allclose(out.data, (x_t - root * y) / sig, atol=1e-8)

    def test_step_constants_match_schedule(self, tiny_schedule):
        c = step_constants(tiny_schedule, np.array([1, 4]))
        a, b = tiny_schedule.mean_weights(1)
        assert c.root.shape == (2, 1)
        assert c.b[0, 0] == pytest.approx(b)
        assert c.snr[0, 0] == pytest.approx(a * a / tiny_schedule.delta[1])
        assert c.snr[1, 0] == pytest.approx(0.0, abs=1e-12)

    def test_schedule_length_must_match_config(self, tiny_schedule):
        cfg = tiny_config(schedule={"n_steps": 3, "betas": [0.1, 0.2, 0.3]})
        with pytest.raises(ConfigError):
            Architecture.from_config(cfg, tiny_schedule)


class TestSpectralFilter:
    @pytest.mark.parametrize("length", [64, 63])
    def test_unit_gain_is_identity(self, length, rng):
        y = rng.normal((3, length))
        out = spectral_filter(Tensor(y), Tensor(np.ones(length // 2 + 1)))
        assert np.allclose(out.data, y, atol=1e-10)

    def test_matches_rfft(self, rng):
        y = rng.normal((2, 64))
        gain = rng.uniform((33,), 0.0, 2.0)
        expected = np.fft.irfft(np.fft.rfft(y, axis=-1) * gain, n=64, axis=-1)
        assert np.allclose(spectral_filter(Tensor(y), Tensor(gain)).data, expected, atol=1e-10)

    def test_band_stop(self):
        n = np.arange(64)
        low, high = np.sin(2 * np.pi * 3 * n / 64), np.sin(2 * np.pi * 20 * n / 64)
        gain = (np.arange(33) <= 8).astype(float)
        out = spectral_filter(Tensor((low + high)[None, :]), Tensor(gain))
        assert np.allclose(out.data[0], low, atol=1e-10)
