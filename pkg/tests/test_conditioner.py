import numpy as np
import pytest

from conditioner import (
    CLASSIFIER,
    ENCODER,
    encode,
    init_conditioner,
    init_injection,
    inject,
    n_frames,
    nc_loss,
    predicted_classes,
)
from conftest import check_param_gradients, tiny_config
from errors import InjectionError, LabelError, ShapeError
from layers import bind, sinusoidal_table
from models import InjectMode
from tensor import Rng, Tensor, mul, sum_, tanh


@pytest.fixture
def spec():
    return tiny_config().model


@pytest.fixture
def params(spec):
    return init_conditioner(spec, Rng(0, "conditioner"))


class TestEncode:
    def test_shapes(self, spec, params, rng):
        out = encode(bind(params), rng.normal((5, spec.signal_length)), spec)
        assert out.embedding.shape == (5, spec.embedding_dim)
        assert out.probs.shape == (5, spec.n_classes)
        assert np.allclose(out.probs.data.sum(axis=-1), 1.0)
        assert np.all(out.probs.data > 0.0)

    def test_single_signal_is_batch_of_one(self, spec, params, rng):
        y = rng.normal((spec.signal_length,))
        single = encode(bind(params), y, spec)
        batch = encode(bind(params), y[None, :], spec)
        assert single.embedding.shape == (1, spec.embedding_dim)
        assert np.array_equal(single.embedding.data, batch.embedding.data)

    def test_deterministic(self, spec, params, rng):
        y = rng.normal((3, spec.signal_length))
        a = encode(bind(params), y, spec)
        b = encode(bind(params), y, spec)
        assert np.array_equal(a.embedding.data, b.embedding.data)

    def test_rows_are_independent(self, spec, params, rng):
        y = rng.normal((4, spec.signal_length))
        full = encode(bind(params), y, spec)
        part = encode(bind(params), y[2:], spec)
        assert np.allclose(full.embedding.data[2:], part.embedding.data)

    def test_level_invariant(self, spec, params, rng):
        y = rng.normal((3, spec.signal_length))
        quiet = encode(bind(params), 0.05 * y, spec)
        loud = encode(bind(params), 4.0 * y, spec)
        assert np.allclose(quiet.embedding.data, loud.embedding.data, atol=1e-8)

    def test_spectral_shape_changes_embedding(self, spec, params, rng):
        n = np.arange(spec.signal_length)
        low = np.sin(2 * np.pi * 0.03 * n)[None, :]
        high = np.sin(2 * np.pi * 0.4 * n)[None, :]
        a = encode(bind(params), low, spec).embedding.data
        b = encode(bind(params), high, spec).embedding.data
        assert np.linalg.norm(a - b) > 1e-3

    def test_length_mismatch(self, spec, params):
        with pytest.raises(ShapeError):
            encode(bind(params), np.zeros((2, spec.signal_length + 1)), spec)

    def test_frame_count(self, spec):
        assert n_frames(spec) == 1 + (64 - 16) // 8

    def test_position_table(self):
        table = sinusoidal_table(7, 4)
        assert table.shape == (7, 4)
        assert np.allclose(table[0], [0.0, 1.0, 0.0, 1.0])
        assert not table.flags.writeable


class TestNcLoss:
    def test_matches_cross_entropy(self, spec, params, rng):
        out = encode(bind(params), rng.normal((4, spec.signal_length)), spec)
        labels = np.array([0, 2, 1, 2])
        expected = -np.mean(np.log(out.probs.data[np.arange(4), labels]))
        assert nc_loss(out, labels).item() == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self, spec, params, rng):
        out = encode(bind(params), rng.normal((2, spec.signal_length)), spec)
        with pytest.raises(LabelError):
            nc_loss(out, [0, spec.n_classes])
        with pytest.raises(LabelError):
            nc_loss(out, [-1, 0])

    def test_label_count(self, spec, params, rng):
        out = encode(bind(params), rng.normal((2, spec.signal_length)), spec)
        with pytest.raises(ShapeError):
            nc_loss(out, [0, 1, 2])

    def test_predicted_classes(self, spec, params, rng):
        out = encode(bind(params), rng.normal((3, spec.signal_length)), spec)
        assert np.array_equal(predicted_classes(out), np.argmax(out.probs.data, axis=-1))


class TestConditionerGradients:
    @pytest.mark.parametrize("point", range(5))
    def test_every_parameter(self, spec, point):
        """Encoder and classifier gradients agree with central differences."""
        rng = Rng(point, "conditioner-grad")
        params = init_conditioner(spec, rng.child("init"))
        y = rng.normal((3, spec.signal_length))
        labels = np.array([0, 1, 2])
        names = sorted(k for k in params if k.startswith((ENCODER, CLASSIFIER)))
        check_param_gradients(
            lambda bound: nc_loss(encode(bound, y, spec), labels), params, names, rng.child("entries")
        )


class TestInject:
    hidden, emb_dim, attn = 6, 4, 3

    def site(self, mode, seed=0, trained=True):
        """A site whose weights have moved away from their identity start."""
        rng = Rng(seed, "inject")
        p = init_injection(mode, self.hidden, self.emb_dim, self.attn, rng)
        if trained:
            p = {k: v + 0.5 * rng.normal(v.shape) for k, v in p.items()}
        return bind({"site." + k: v for k, v in p.items()})

    @pytest.mark.parametrize("mode", list(InjectMode))
    def test_fresh_site_is_identity(self, mode, rng):
        h = Tensor(rng.normal((3, self.hidden)))
        e = Tensor(rng.normal((3, self.emb_dim)))
        out = inject(mode, h, e, self.site(mode, trained=False), "site.")
        assert np.allclose(out.data, h.data, rtol=0.0, atol=1e-12)

    @pytest.mark.parametrize("mode", list(InjectMode))
    def test_output_width(self, mode, rng):
        h, e = Tensor(rng.normal((2, self.hidden))), Tensor(rng.normal((2, self.emb_dim)))
        assert inject(mode, h, e, self.site(mode), "site.").shape == (2, self.hidden)

    def test_addition_with_zero_embedding_is_identity(self, rng):
        h = Tensor(rng.normal((3, self.hidden)))
        out = inject(InjectMode.addition, h, Tensor(np.zeros((3, self.emb_dim))), self.site("addition"), "site.")
        assert np.array_equal(out.data, h.data)

    def test_cross_attention_single_token(self, rng):
        """One key/value token: the softmax weight is exactly 1."""
        h = Tensor(rng.normal((2, self.hidden)))
        e = Tensor(rng.normal((2, self.emb_dim)))
        site = self.site("cross-attn")
        out = inject("cross-attn", h, e, site, "site.")
        expected = h.data + (e.data @ site["site.wv"].data) @ site["site.wo"].data
        assert np.allclose(out.data, expected)

    def test_concat_is_linear_in_both_parts(self, rng):
        h = Tensor(rng.normal((2, self.hidden)))
        e = Tensor(rng.normal((2, self.emb_dim)))
        site = self.site("concat")
        w = site["site.w"].data
        expected = h.data @ w[: self.hidden] + e.data @ w[self.hidden :] + site["site.b"].data
        assert np.allclose(inject("concat", h, e, site, "site.").data, expected)

    def test_unknown_mode(self, rng):
        h, e = Tensor(np.zeros((1, self.hidden))), Tensor(np.zeros((1, self.emb_dim)))
        with pytest.raises(InjectionError):
            inject("film", h, e, self.site("addition"), "site.")

    def test_width_mismatch(self):
        h, e = Tensor(np.zeros((1, self.hidden))), Tensor(np.zeros((1, self.emb_dim + 1)))
        for mode in InjectMode:
            with pytest.raises(InjectionError):
                inject(mode, h, e, self.site(mode), "site.")

    def test_batch_mismatch(self):
        h, e = Tensor(np.zeros((2, self.hidden))), Tensor(np.zeros((3, self.emb_dim)))
        with pytest.raises(InjectionError):
            inject("addition", h, e, self.site("addition"), "site.")

    @pytest.mark.parametrize("mode", list(InjectMode))
    def test_gradients(self, mode):
        rng = Rng(3, "inject-grad")
        site = init_injection(mode, self.hidden, self.emb_dim, self.attn, rng)
        p = {"site." + k: v + 0.5 * rng.normal(v.shape) for k, v in site.items()}
        p["h"] = rng.normal((2, self.hidden))
        p["e"] = rng.normal((2, self.emb_dim))
        weights = Tensor(rng.normal((2, self.hidden)))

        def loss(bound):
            site = {k: v for k, v in bound.items() if k.startswith("site.")}
            return sum_(mul(tanh(inject(mode, bound["h"], bound["e"], site, "site.")), weights))

        check_param_gradients(loss, p, sorted(p), rng.child("entries"))

