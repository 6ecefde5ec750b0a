"""Tensor ops against independent numpy oracles, plus tape mechanics."""

import numpy as np
import pytest

from espresso.prng import Prng
from espresso.tensor import (
    DenseTensor,
    GradTape,
    MacCounter,
    ShapeError,
    add,
    broadcast_to,
    concat,
    count_macs,
    finite_diff_grad_check,
    gelu,
    iter_tensors,
    layer_norm,
    linear,
    matmul,
    mean_axis,
    mul,
    ones,
    permute,
    record_op,
    reshape,
    scale,
    softmax_lastdim,
    sum_all,
    zeros,
)


def rand(shape, seed=0):
    n = int(np.prod(shape)) if shape else 1
    return DenseTensor(Prng(seed).normals(n).reshape(shape))


def matmul_oracle(a, b):
    """Triple-loop reference, no numpy matmul."""
    m, k = a.shape
    k2, r = b.shape
    assert k == k2
    out = np.zeros((m, r))
    for i in range(m):
        for j in range(r):
            acc = 0.0
            for x in range(k):
                acc += a[i, x] * b[x, j]
            out[i, j] = acc
    return out


class TestDenseTensor:
    def test_flat_storage_round_trip(self):
        t = DenseTensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert np.array_equal(t.nd, [[1.0, 2.0], [3.0, 4.0]])

    def test_scalar_shape(self):
        t = DenseTensor(3.5)
        assert t.shape == ()
        assert t.item() == 3.5

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ShapeError):
            DenseTensor([1.0, 2.0]).item()

    def test_int_input_becomes_float64(self):
        assert DenseTensor([1, 2, 3]).dtype == np.float64

    def test_float32_preserved(self):
        t = DenseTensor(np.ones(3, dtype=np.float32))
        assert t.dtype == np.float32

    def test_readonly_input_copied(self):
        src = np.broadcast_to(np.arange(3.0), (2, 3))
        t = DenseTensor(src)
        t.data[0] = 99.0
        assert t.nd[0, 0] == 99.0

    def test_constructors(self):
        assert np.array_equal(zeros((2, 3)).nd, np.zeros((2, 3)))
        assert np.array_equal(ones((4,)).nd, np.ones(4))


class TestMatmul:
    def test_matches_triple_loop(self):
        a, b = rand((4, 3), 1), rand((3, 5), 2)
        assert np.allclose(matmul(a, b).nd, matmul_oracle(a.nd, b.nd), atol=1e-13)

    def test_batched_matches_per_slice(self):
        a, b = rand((2, 4, 3), 3), rand((2, 3, 5), 4)
        out = matmul(a, b).nd
        for i in range(2):
            assert np.allclose(out[i], matmul_oracle(a.nd[i], b.nd[i]), atol=1e-13)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(4, 3\).*\(4, 5\)"):
            matmul(rand((4, 3)), rand((4, 5)))

    def test_leading_axes_must_match(self):
        with pytest.raises(ShapeError):
            matmul(rand((2, 4, 3)), rand((3, 3, 5)))

    def test_gradients(self):
        a, b = rand((4, 3), 5), rand((3, 5), 6)
        w = rand((4, 5), 7)
        err = finite_diff_grad_check(lambda: sum_all(mul(matmul(a, b), w)), [a, b])
        assert err < 1e-8


class TestLinear:
    def test_matches_numpy(self):
        x, w, b = rand((2, 3, 5), 1), rand((5, 4), 2), rand((4,), 3)
        expect = x.nd @ w.nd + b.nd
        assert np.allclose(linear(x, w, b).nd, expect, atol=1e-12)

    def test_bias_optional(self):
        x, w = rand((3, 5), 1), rand((5, 4), 2)
        assert np.allclose(linear(x, w).nd, x.nd @ w.nd, atol=1e-12)

    def test_rejects_feature_mismatch(self):
        with pytest.raises(ShapeError):
            linear(rand((3, 5)), rand((4, 4)))


class TestElementwise:
    def test_add_same_shape(self):
        a, b = rand((3, 4), 1), rand((3, 4), 2)
        assert np.array_equal(add(a, b).nd, a.nd + b.nd)

    def test_add_suffix_broadcast(self):
        a, b = rand((3, 4), 1), rand((4,), 2)
        assert np.array_equal(add(a, b).nd, a.nd + b.nd)

    def test_add_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            add(rand((3, 4)), rand((3,)))

    def test_mul_broadcast_grads_match_input_shapes(self):
        a, b = rand((2, 3, 1), 1), rand((1, 5), 2)
        with GradTape() as tape:
            loss = sum_all(mul(a, b))
            tape.backward(loss)
        assert tape.grad(a).shape == (2, 3, 1)
        assert tape.grad(b).shape == (1, 5)

    def test_scale(self):
        x = rand((2, 3), 1)
        assert np.array_equal(scale(x, -2.0).nd, -2.0 * x.nd)

    def test_gelu_reference_values(self):
        # tanh-approximate gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        inner = np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)
        expect = 0.5 * x * (1.0 + np.tanh(inner))
        assert np.allclose(gelu(DenseTensor(x)).nd, expect, atol=1e-15)


class TestShapeOps:
    def test_broadcast_to_prepends(self):
        x = rand((4,), 1)
        out = broadcast_to(x, (3, 4))
        assert np.array_equal(out.nd, np.broadcast_to(x.nd, (3, 4)))

    def test_broadcast_to_rejects_non_suffix(self):
        with pytest.raises(ShapeError):
            broadcast_to(rand((4,)), (4, 3))

    def test_reshape_and_size_check(self):
        x = rand((2, 6), 1)
        assert reshape(x, (3, 4)).shape == (3, 4)
        with pytest.raises(ShapeError):
            reshape(x, (5, 2))

    def test_permute_inverse(self):
        x = rand((2, 3, 4), 1)
        y = permute(x, (2, 0, 1))
        assert np.array_equal(y.nd, np.transpose(x.nd, (2, 0, 1)))
        assert np.array_equal(permute(y, (1, 2, 0)).nd, x.nd)

    def test_permute_rejects_bad_axes(self):
        with pytest.raises(ShapeError):
            permute(rand((2, 3)), (0, 0))

    def test_concat(self):
        a, b = rand((2, 3), 1), rand((2, 5), 2)
        out = concat([a, b], axis=1)
        assert np.array_equal(out.nd, np.concatenate([a.nd, b.nd], axis=1))

    def test_concat_rejects_mismatched(self):
        with pytest.raises(ShapeError):
            concat([rand((2, 3)), rand((3, 3))], axis=1)

    def test_mean_axis(self):
        x = rand((3, 4, 5), 1)
        assert np.allclose(mean_axis(x, 1).nd, x.nd.mean(axis=1), atol=1e-15)

    def test_sum_all(self):
        x = rand((3, 4), 1)
        assert np.isclose(sum_all(x).item(), x.nd.sum())


class TestNormalizers:
    def test_softmax_rows(self):
        x = rand((4, 6), 1)
        y = softmax_lastdim(x).nd
        expect = np.exp(x.nd - x.nd.max(axis=-1, keepdims=True))
        expect /= expect.sum(axis=-1, keepdims=True)
        assert np.allclose(y, expect, atol=1e-14)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        x = rand((2, 5), 1)
        shifted = DenseTensor(x.nd + 1000.0)
        assert np.allclose(softmax_lastdim(x).nd, softmax_lastdim(shifted).nd, atol=1e-12)

    def test_layer_norm_standardizes(self):
        x = rand((5, 8), 1)
        y = layer_norm(x, ones((8,)), zeros((8,))).nd
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_gain_bias(self):
        x, g, b = rand((3, 6), 1), rand((6,), 2), rand((6,), 3)
        base = layer_norm(x, ones((6,)), zeros((6,))).nd
        assert np.allclose(layer_norm(x, g, b).nd, base * g.nd + b.nd, atol=1e-12)


class TestGradTape:
    def test_no_tape_records_nothing(self):
        tape = GradTape()
        matmul(rand((2, 3)), rand((3, 2)))
        assert not tape._records

    def test_reuse_accumulates(self):
        x = rand((3,), 1)
        with GradTape() as tape:
            loss = sum_all(add(x, x))
            tape.backward(loss)
        assert np.allclose(tape.grad(x), 2.0 * np.ones(3))

    def test_backward_needs_scalar(self):
        x = rand((3,), 1)
        with GradTape() as tape:
            y = add(x, x)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_grad_none_for_untouched(self):
        x = rand((3,), 1)
        other = rand((3,), 2)
        with GradTape() as tape:
            tape.backward(sum_all(x))
        assert tape.grad(other) is None

    def test_record_op_custom(self):
        x = rand((4,), 1)
        with GradTape() as tape:
            doubled = DenseTensor(2.0 * x.nd)
            record_op(doubled, (x,), lambda g: (2.0 * g,))
            tape.backward(sum_all(doubled))
        assert np.allclose(tape.grad(x), 2.0 * np.ones(4))

    def test_grads_keyed_by_identity_not_value(self):
        x = rand((3,), 1)
        twin = DenseTensor(x.nd.copy())
        with GradTape() as tape:
            tape.backward(sum_all(x))
        assert tape.grad(twin) is None


class TestMacCounter:
    def test_matmul_macs(self):
        with count_macs() as mc:
            matmul(rand((4, 3)), rand((3, 5)))
        assert mc.total == 4 * 3 * 5

    def test_batched_matmul_macs(self):
        with count_macs() as mc:
            matmul(rand((2, 4, 3)), rand((2, 3, 5)))
        assert mc.total == 2 * 4 * 3 * 5

    def test_linear_macs_ignore_bias(self):
        with count_macs() as mc:
            linear(rand((7, 5)), rand((5, 4)), rand((4,)))
        assert mc.total == 7 * 5 * 4

    def test_mean_and_elementwise_count_zero(self):
        with count_macs() as mc:
            x = rand((6, 4))
            mean_axis(x, 0)
            gelu(x)
            softmax_lastdim(x)
            layer_norm(x, ones((4,)), zeros((4,)))
        assert mc.total == 0

    def test_nested_counters_both_count(self):
        with count_macs() as outer:
            matmul(rand((2, 2)), rand((2, 2)))
            with count_macs() as inner:
                matmul(rand((3, 3)), rand((3, 3)))
        assert inner.total == 27
        assert outer.total == 8 + 27


class TestFiniteDiff:
    def test_exact_for_linear_function(self):
        p = rand((3,), 1)
        w = rand((3,), 2)
        err = finite_diff_grad_check(lambda: sum_all(mul(p, w)), [p])
        assert err < 1e-9

    def test_catches_wrong_gradient(self):
        p = rand((3,), 1)

        def wrong():
            out = DenseTensor(p.nd * 3.0)
            record_op(out, (p,), lambda g: (2.0 * g,))  # should be 3 g
            return sum_all(out)

        assert finite_diff_grad_check(wrong, [p]) > 0.1

    def test_does_not_move_params(self):
        p = rand((4,), 1)
        before = p.nd.copy()
        finite_diff_grad_check(lambda: sum_all(mul(p, p)), [p])
        assert np.array_equal(p.nd, before)


class TestIterTensors:
    def test_walks_dataclasses_in_order(self):
        from espresso.projectors import MlpParams, init_mlp_params

        mlp = init_mlp_params(3, 4, Prng(0))
        names = [name for name, _ in iter_tensors(mlp)]
        assert names == ["w1", "b1", "w2", "b2"]
        assert isinstance(mlp, MlpParams)

    def test_prefix_and_nesting(self):
        from espresso.attention import init_qformer_params

        qf = init_qformer_params(dim=4, num_queries=2, heads=2, blocks=2,
                                 ffn_mult=2, prng=Prng(1))
        names = [name for name, _ in iter_tensors(qf, "qf")]
        assert names[0] == "qf.queries"
        assert any(name.startswith("qf.blocks[0].") for name in names)
        assert any(name.startswith("qf.blocks[1].") for name in names)
        assert len(names) == len(set(names))
