"""
对齐投影与回归头测试

作者：ST-Instruct
版本：0.1.0
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from st_instruct import autodiff as ad
from st_instruct.alignment import AlignmentProjection, RegressionHead, classify, project, regress
from st_instruct.autodiff import ParameterSet, Tensor
from st_instruct.exceptions import ShapeMismatchException


class TestProject:
    def test_zero_input_gives_bias(self):
        b_p = Tensor(np.array([1.0, -2.0, 0.5]))
        out = project(Tensor(np.zeros((2, 3, 4))), Tensor(np.ones((4, 3))), b_p)
        assert out.shape == (2, 3, 3)
        np.testing.assert_array_equal(out.data, np.broadcast_to(b_p.data, (2, 3, 3)))

    def test_identity(self):
        psi = Tensor(np.random.default_rng(0).normal(size=(2, 2, 4)))
        out = project(psi, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, psi.data, rtol=1e-6)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_affine(self, a):
        rng = np.random.default_rng(1)
        W, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
        x1, x2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        mixed = project(Tensor(a * x1 + (1 - a) * x2), W, b).data
        expected = a * project(Tensor(x1), W, b).data + (1 - a) * project(Tensor(x2), W, b).data
        np.testing.assert_allclose(mixed, expected, atol=1e-4)

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatchException):
            project(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))


class TestRegress:
    def test_hand_example(self):
        out = regress(Tensor([[2.0]]), Tensor([[3.0]]), Tensor([[1.0]]), Tensor([[1.0]]), Tensor([[1.0, 1.0]]))
        assert out.data.tolist() == [[5.0]]

    def test_zero_branches(self):
        rng = np.random.default_rng(2)
        zeros = Tensor(np.zeros((4, 6)))
        out = regress(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6))),
                      zeros, zeros, Tensor(rng.normal(size=(5, 8))))
        assert out.shape == (3, 5)
        assert not out.data.any()

    def test_gamma_only_through_w2(self):
        rng = np.random.default_rng(3)
        H = Tensor(rng.normal(size=(2, 6)))
        W1, W3 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(5, 8)))
        W2 = Tensor(np.zeros((4, 6)))
        a = regress(H, Tensor(rng.normal(size=(2, 6))), W1, W2, W3).data
        b = regress(H, Tensor(rng.normal(size=(2, 6))), W1, W2, W3).data
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        W = Tensor(np.zeros((4, 6)))
        with pytest.raises(ShapeMismatchException):
            regress(Tensor(np.zeros((2, 6))), Tensor(np.zeros((3, 6))), W, W, Tensor(np.zeros((5, 8))))


class TestClassify:
    def test_zero_is_half(self):
        np.testing.assert_array_equal(classify(Tensor(np.zeros(4))).data, np.full(4, 0.5))

    def test_monotone(self):
        probs = classify(Tensor(np.linspace(-5, 5, 11))).data
        assert np.all(np.diff(probs) > 0)

    def test_saturation(self, float64):
        probs = classify(Tensor([20.0, -20.0])).data
        assert abs(probs[0] - 1.0) < 1e-8
        assert abs(probs[1]) < 1e-8


class TestModules:
    def test_parameter_names_and_shapes(self):
        params = ParameterSet()
        rng = np.random.default_rng(0)
        AlignmentProjection(6, 8, params, rng)
        RegressionHead(8, 4, 12, params, rng)
        assert params.names() == ["align.W_p", "align.b_p", "regression.W1", "regression.W2", "regression.W3"]
        assert params["regression.W3"].shape == (12, 8)

    def test_end_to_end_gradients(self, float64):
        params = ParameterSet()
        rng = np.random.default_rng(4)
        align = AlignmentProjection(6, 8, params, rng)
        head = RegressionHead(8, 4, 3, params, rng)
        psi = Tensor(rng.normal(size=(2, 2, 6)))
        gamma = Tensor(rng.normal(size=(2, 2, 8)))
        target = rng.normal(size=(2, 2, 3)) + 5.0

        def loss(_):
            return ad.l1_loss(head(align(psi), gamma), target)

        for name in params.names():
            assert ad.finite_difference_check(loss, params[name]) < 1e-4, name
