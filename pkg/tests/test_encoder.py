"""
时空依赖编码器测试

作者：ST-Instruct
版本：0.1.0
"""

import numpy as np
import pytest

from st_instruct import autodiff as ad
from st_instruct.autodiff import ParameterSet, Tensor
from st_instruct.config import EncoderConfig
from st_instruct.encoder import STEncoder, gated_conv, inject, pretrain_encoder
from st_instruct.exceptions import ErrorCode, ShapeMismatchException
from st_instruct.st_data import WindowSample

SMALL = EncoderConfig(n_layers=2, gate_kernel=2, dilation=[1, 2], d_in=4, d_out=5, d_out_prime=3, d=6)


def _encoder(config=SMALL, history_length=6, seed=0):
    params = ParameterSet()
    return STEncoder(config, history_length, params, np.random.default_rng(seed)), params


class TestGatedLayer:
    def test_hand_example(self):
        out = gated_conv(
            Tensor([[2.0]]),
            Tensor([[[1.0]]]), Tensor([0.0]),
            Tensor([[[0.0]]]), Tensor([0.0]),
        )
        assert out.data.tolist() == [[3.0]]

    def test_zero_weights_pass_residual(self):
        E = Tensor(np.arange(12, dtype=np.float32).reshape(6, 2))
        zeros = Tensor(np.zeros((2, 2, 2)))
        out = gated_conv(E, zeros, Tensor(np.zeros(2)), zeros, Tensor(np.zeros(2)), dilation=2)
        np.testing.assert_array_equal(out.data, E.data[2:])

    def test_output_length(self):
        rng = np.random.default_rng(1)
        E = Tensor(rng.normal(size=(12, 3)))
        W = Tensor(rng.normal(size=(2, 3, 3)))
        b = Tensor(np.zeros(3))
        assert gated_conv(E, W, b, W, b).shape == (11, 3)

    def test_too_short_names_receptive_field(self):
        W = Tensor(np.zeros((3, 1, 1)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ShapeMismatchException) as exc_info:
            gated_conv(Tensor(np.zeros((4, 1))), W, b, W, b, dilation=2)
        assert exc_info.value.error_code == ErrorCode.RECEPTIVE_FIELD_ERROR
        assert "5" in exc_info.value.message

    def test_width_change_needs_adapter(self):
        W = Tensor(np.zeros((1, 2, 3)))
        b = Tensor(np.zeros(3))
        with pytest.raises(ShapeMismatchException):
            gated_conv(Tensor(np.zeros((4, 2))), W, b, W, b)


class TestInjection:
    def test_hand_example(self):
        out = inject(Tensor([[3.0]]), Tensor([[[1.0]]]), Tensor([0.0]))
        assert out.data.tolist() == [3.0]

    def test_zero_kernels_keep_previous(self):
        psi = Tensor(np.ones((4, 2)))
        previous = Tensor([1.5, -2.0])
        out = inject(psi, Tensor(np.zeros((4, 2, 2))), Tensor(np.zeros(2)), previous)
        np.testing.assert_array_equal(out.data, previous.data)

    def test_layer_count_mismatch(self):
        encoder, _ = _encoder()
        psis = encoder.layer_outputs(np.zeros((1, 6, 1), dtype=np.float32))
        with pytest.raises(ShapeMismatchException):
            encoder.inject_and_fuse(psis[:1])


class TestEncoder:
    def test_embed_zero_input(self):
        encoder, _ = _encoder()
        E = encoder.embed_input(np.zeros((2, 6, 3)))
        assert E.shape == (2, 3, 6, 4)
        assert not E.data.any()

    def test_embed_is_linear(self):
        encoder, _ = _encoder()
        x = np.random.default_rng(3).normal(size=(2, 6, 1)).astype(np.float32)
        np.testing.assert_allclose(encoder.embed_input(3.0 * x).data, 3.0 * encoder.embed_input(x).data, rtol=1e-5)

    def test_output_shape(self):
        encoder, _ = _encoder()
        assert encoder.encode(np.ones((3, 6, 2), dtype=np.float32)).shape == (3, 2, 6)

    def test_default_configuration(self):
        encoder, _ = _encoder(EncoderConfig(), history_length=12)
        out = encoder.encode(np.random.default_rng(0).normal(size=(4, 12, 2)))
        assert out.shape == (4, 2, 64)

    def test_region_permutation(self):
        encoder, _ = _encoder()
        x = np.random.default_rng(2).normal(size=(5, 6, 2)).astype(np.float32)
        order = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(encoder.encode(x[order]).data, encoder.encode(x).data[order], atol=1e-6)

    def test_no_cross_region_mixing(self):
        encoder, _ = _encoder()
        x = np.random.default_rng(4).normal(size=(3, 6, 1)).astype(np.float32)
        changed = x.copy()
        changed[2] += 10.0
        a, b = encoder.encode(x).data, encoder.encode(changed).data
        np.testing.assert_allclose(a[:2], b[:2], atol=1e-6)

    def test_history_shorter_than_receptive_field(self):
        with pytest.raises(ShapeMismatchException) as exc_info:
            _encoder(history_length=3)
        assert exc_info.value.error_code == ErrorCode.RECEPTIVE_FIELD_ERROR

    def test_wrong_history_length(self):
        encoder, _ = _encoder()
        with pytest.raises(ShapeMismatchException):
            encoder.encode(np.zeros((1, 8, 1)))

    def test_parameter_names(self):
        encoder, params = _encoder()
        names = encoder.parameter_names()
        assert names == params.names()
        assert "encoder.layer0.Wres" in names
        assert "encoder.layer1.Wres" not in names
        assert params["encoder.layer1.Ws"].shape == (3, 5, 3)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed, float64):
        encoder, params = _encoder(seed=seed)
        rng = np.random.default_rng(seed + 10)
        x = rng.normal(size=(2, 6, 2))
        target = rng.normal(size=(2, 2, 6)) + 5.0

        def loss(_):
            return ad.l1_loss(encoder.encode(x), target)

        for name in params.names():
            assert ad.finite_difference_check(loss, params[name]) < 1e-4, name


class TestPretrain:
    def _windows(self, count=6):
        rng = np.random.default_rng(0)
        series = 10.0 + 5.0 * np.sin(np.arange(40) / 3.0)
        return [
            WindowSample(
                history=(series[s:s + 6, None] + rng.normal(0, 0.1, (6, 1))).astype(np.float32),
                target=series[s + 6:s + 10, None].astype(np.float32),
                region_id=s, window_start_step=s,
            )
            for s in range(count)
        ]

    def test_losses_per_epoch(self):
        encoder, params = _encoder()
        before = params.state_arrays()
        losses = pretrain_encoder(encoder, self._windows(), epochs=3, prediction_length=4,
                                  learning_rate=0.01, seed=1, batch_size=4)
        assert len(losses) == 3
        assert all(np.isfinite(losses))
        assert "pretrain.W" not in params
        assert any(not np.array_equal(before[n], params[n].data) for n in params.names())

    def test_no_epochs(self):
        encoder, _ = _encoder()
        assert pretrain_encoder(encoder, self._windows(), epochs=0, prediction_length=4) == []
