"""張量、tape 與可微分運算測試"""

import math

import numpy as np
import pytest

from app.core import functional as F
from app.core.exceptions import AbsentGradError, ContractError, DimensionError, NumericalError
from app.core.gradcheck import gradcheck
from app.core.tensor import Tape, Tensor, backward, no_grad

TOL = 1e-5


def rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype="f64")


class TestTape:
    """記錄範圍與反向傳播的前置條件"""

    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_scalar_reductions_stay_zero_dim(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), dtype="f64", requires_grad=True)
        with Tape() as tape:
            total = F.sum(x)
            loss = F.mean(F.mul(x, x))
        assert total.shape == ()
        assert loss.shape == ()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, x.data / 3.0, atol=1e-12)

    def test_zero_dim_input_keeps_shape(self):
        assert Tensor(2.5).shape == ()
        assert Tensor(np.float64(2.5), dtype="f64").item() == 2.5

    def test_half_square_grad_is_x(self, rng):
        x = Tensor(rng.standard_normal(5), dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.mul(F.sum(F.mul(x, x)), 0.5)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, x.data, atol=1e-12)

    def test_backward_after_exiting_block(self):
        x = Tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.sum(F.mul(x, 3.0))
        backward(loss)
        np.testing.assert_allclose(x.grad, [3.0, 3.0])
        assert tape.consumed

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        y = F.sum(F.mul(x, 2.0))
        assert not y.requires_grad
        with pytest.raises(ContractError):
            backward(y)

    def test_no_grad_inside_tape(self):
        x = Tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = F.mul(x, 2.0)
        assert not y.requires_grad
        assert len(tape) == 0

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            y = F.mul(x, 2.0)
        with pytest.raises(ContractError, match="純量"):
            tape.backward(y)

    def test_double_backward_rejected(self):
        x = Tensor([1.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x)
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)
        with pytest.raises(ContractError):
            with tape:
                pass

    def test_reset_allows_reuse(self):
        x = Tensor([1.0], dtype="f64", requires_grad=True)
        tape = Tape()
        with tape:
            loss = F.sum(x)
        tape.backward(loss)
        tape.reset()
        with tape:
            loss = F.sum(F.mul(x, 2.0))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [3.0])

    def test_absent_grad(self):
        x = Tensor([1.0], dtype="f64", requires_grad=True)
        unused = Tensor([2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x)
        tape.backward(loss)
        assert not unused.has_grad
        with pytest.raises(AbsentGradError):
            _ = unused.grad

    def test_detached_tensor_has_no_grad(self):
        x = Tensor([1.0, 2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            d = x.detach()
            loss = F.sum(F.mul(x, d))
        tape.backward(loss)
        with pytest.raises(AbsentGradError):
            _ = d.grad

    def test_leaf_grads_accumulate(self):
        x = Tensor([1.0, -1.0], dtype="f64", requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = F.sum(F.mul(x, 3.0))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert not x.has_grad

    def test_shared_input_sums_paths(self):
        x = Tensor([2.0], dtype="f64", requires_grad=True)
        with Tape() as tape:
            loss = F.sum(F.add(F.mul(x, x), x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])


class TestTensorErrors:
    def test_nan_input_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, float("nan")])

    def test_non_finite_forward_rejected(self):
        with pytest.raises(NumericalError):
            F.mul(Tensor([1.0], dtype="f64"), float("inf"))

    def test_dtype_mismatch(self):
        with pytest.raises(ContractError, match="dtype"):
            F.add(Tensor([1.0], dtype="f32"), Tensor([1.0], dtype="f64"))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            F.add(Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_float64_array_defaults_to_f32(self):
        assert Tensor(np.eye(2)).dtype == "f32"
        assert Tensor(np.eye(2), dtype="f64").dtype == "f64"
        assert Tensor(Tensor([1.0], dtype="f64")).dtype == "f64"

    def test_unsupported_dtype(self):
        with pytest.raises(ContractError):
            Tensor([1], dtype="int32")

    def test_item_needs_single_element(self):
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()


class TestMatmul:
    def test_identity(self):
        out = F.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.numpy(), [[3, 4], [5, 6]])

    def test_zero(self):
        out = F.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.numpy(), [[0.0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = F.matmul(Tensor(a, dtype="f64"), Tensor(b, dtype="f64")).numpy()
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 4)), dtype="f64")
        w = np.zeros((2, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        np.testing.assert_allclose(F.depthwise_conv2d(x, Tensor(w, dtype="f64")).numpy(), x.numpy())

    def test_zero_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4)), dtype="f64")
        out = F.depthwise_conv2d(x, Tensor(np.zeros((2, 1, 3, 3)), dtype="f64"))
        np.testing.assert_array_equal(out.numpy(), np.zeros((2, 4, 4)))

    def test_box_kernel_nested_loop_oracle(self):
        ramp = np.arange(9.0).reshape(1, 3, 3)
        out = F.depthwise_conv2d(Tensor(ramp, dtype="f64"), Tensor(np.ones((1, 1, 3, 3)), dtype="f64")).numpy()
        expected = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if 0 <= i + di < 3 and 0 <= j + dj < 3:
                            expected[i, j] += ramp[0, i + di, j + dj]
        np.testing.assert_allclose(out[0], expected)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.depthwise_conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))


class TestConv2d:
    def test_nested_loop_oracle_with_stride(self, rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = F.conv2d(Tensor(x, dtype="f64"), Tensor(w, dtype="f64"), Tensor(b, dtype="f64"),
                       stride=2, padding=1).numpy()
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestSoftmax:
    @pytest.mark.parametrize("c", [0.0, 5.0, -1000.0])
    def test_constant_is_uniform(self, c):
        out = F.softmax(Tensor([c, c, c], dtype="f64")).numpy()
        np.testing.assert_allclose(out, [1 / 3] * 3)

    def test_scalar_oracle(self):
        e = math.e
        out = F.softmax(Tensor([1.0, 0.0, 0.0], dtype="f64")).numpy()
        np.testing.assert_allclose(out, [e / (e + 2), 1 / (e + 2), 1 / (e + 2)], atol=1e-15)

    def test_large_logits_stay_finite(self):
        out = F.softmax(Tensor([1000.0, 1001.0], dtype="f64")).numpy()
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(), 1.0)

    def test_shift_invariance(self, rng):
        for _ in range(100):
            x = rng.standard_normal(rng.integers(2, 8))
            s = float(rng.uniform(-50.0, 50.0))
            base = F.softmax(Tensor(x, dtype="f64")).numpy()
            shifted = F.softmax(Tensor(x + s, dtype="f64")).numpy()
            np.testing.assert_allclose(shifted, base, atol=1e-6)
            assert base.sum() == pytest.approx(1.0, abs=1e-6)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            F.softmax(Tensor(np.zeros((2, 0))), axis=1)


class TestShapes:
    def test_pixel_shuffle_inverts_unshuffle(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 6)), dtype="f64")
        np.testing.assert_array_equal(F.pixel_shuffle(F.pixel_unshuffle(x, 2), 2).numpy(), x.numpy())

    def test_upsample_same_size_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5)), dtype="f64")
        np.testing.assert_allclose(F.upsample_bilinear(x, (3, 5)).numpy(), x.numpy(), atol=1e-15)

    def test_reshape_rejects_bad_size(self):
        with pytest.raises(DimensionError):
            F.reshape(Tensor(np.ones(6)), (4, 2))

    def test_take_out_of_range(self):
        with pytest.raises(DimensionError):
            F.take(Tensor(np.ones(3)), np.array([3]))


class TestMacCounting:
    def test_counts_by_op(self):
        with F.count_macs() as counter:
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
            F.conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((3, 2, 3, 3))), padding=1)
            F.depthwise_conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((2, 1, 3, 3))))
        assert counter.by_op == {"matmul": 24, "conv2d": 1350, "depthwise_conv2d": 288}
        assert counter.total == 24 + 1350 + 288

    def test_nothing_counted_outside_block(self):
        with F.count_macs() as counter:
            pass
        F.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert counter.total == 0


class TestGradcheck:
    """f64 中央差分，範數相對誤差 < 1e-5"""

    @pytest.mark.parametrize("seed", range(5))
    def test_elementwise_and_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        assert gradcheck(lambda x, y: F.matmul(F.gelu(x), y), [a, b]) < TOL
        c, d = rand(rng, 3, 4), rand(rng, 3, 4)
        assert gradcheck(lambda x, y: F.sub(F.mul(x, y), F.relu(x)), [c, d]) < TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_and_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, 4, 5), rand(rng, 5), rand(rng, 5)
        assert gradcheck(lambda t: F.softmax(t, axis=-1), [x]) < TOL
        assert gradcheck(lambda t, g, s: F.layer_norm(t, g, s), [x, w, b]) < TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_convolutions(self, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, 2, 6, 6), rand(rng, 3, 2, 3, 3), rand(rng, 3)
        assert gradcheck(lambda t, k, s: F.conv2d(t, k, s, stride=2, padding=1), [x, w, b]) < TOL
        dw = rand(rng, 2, 1, 3, 3)
        assert gradcheck(F.depthwise_conv2d, [x, dw]) < TOL

    def test_channel_affine_and_bias(self, rng):
        x, g, b = rand(rng, 3, 2, 2), rand(rng, 3), rand(rng, 3)
        assert gradcheck(F.channel_affine, [x, g, b]) < TOL
        m, bias = rand(rng, 4, 3), rand(rng, 3)
        assert gradcheck(F.add_bias, [m, bias]) < TOL

    def test_resampling(self, rng):
        x = rand(rng, 2, 3, 4)
        assert gradcheck(lambda t: F.upsample_bilinear(t, (6, 8)), [x]) < TOL
        y = rand(rng, 8, 2, 3)
        assert gradcheck(lambda t: F.pixel_shuffle(t, 2), [y]) < TOL

    def test_indexing(self, rng):
        x, y = rand(rng, 4, 3), rand(rng, 2, 3)
        assert gradcheck(lambda a: F.take(a, np.array([0, 5, 5, 11])), [x]) < TOL
        assert gradcheck(lambda a: a[1:3], [x]) < TOL
        assert gradcheck(lambda a, b: F.concatenate([a, b], axis=0), [x, y]) < TOL
        assert gradcheck(lambda a: F.mean(F.transpose(a), axis=1), [x]) < TOL

    def test_similarity_and_losses(self, rng):
        a, b = rand(rng, 6), rand(rng, 6)
        assert gradcheck(F.cosine_similarity, [a, b]) < TOL
        y, t = rand(rng, 2, 3, 3), rand(rng, 2, 3, 3)
        assert gradcheck(lambda p, q: F.smooth_l1(p, q, 0.7), [y, t]) < TOL

    def test_clip(self):
        x = Tensor([-0.5, 0.2, 0.7, 1.4], dtype="f64")
        assert gradcheck(lambda t: F.clip(t, 0.0, 1.0), [x]) < TOL
