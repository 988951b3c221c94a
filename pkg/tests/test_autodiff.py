import numpy as np
import pytest

from sonoalign import autodiff as ad


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def check(f, params, tol=1e-4, step=1e-5):
    report = ad.grad_check(f, params, step=step, tol=tol)
    assert report.passed, f"max rel err {report.max_rel_err}"
    return report


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(ad.constant([[1, 0], [0, 1]]), ad.constant([[3], [4]]))
        assert np.array_equal(out.data, [[3], [4]])

    def test_small_product(self):
        out = ad.matmul(ad.constant([[1, 2]]), ad.constant([[3], [4]]))
        assert out.item() == 11

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_gradient_vs_central_differences(self):
        a = ad.Tensor(rand((3, 4), 0), requires_grad=True)
        b = ad.Tensor(rand((4, 2), 1), requires_grad=True)
        w = ad.constant(rand((3, 2), 2))
        check(lambda: ad.sum_elems(ad.mul(ad.matmul(a, b), w)), [a, b])


class TestRowSoftmax:
    def test_symmetry(self):
        out = ad.row_softmax(ad.constant([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_shift_invariance(self):
        for x in (-3.0, 0.0, 100.0):
            out = ad.row_softmax(ad.constant([[x, x, x]]))
            assert np.allclose(out.data, 1 / 3, atol=1e-12)

    def test_log_ratio(self):
        out = ad.row_softmax(ad.constant([[np.log(1), np.log(3)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one(self):
        out = ad.row_softmax(ad.constant(rand((5, 7), 3) * 10))
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        a = ad.Tensor(rand((3, 5), 4), requires_grad=True)
        w = ad.constant(rand((3, 5), 5))
        check(lambda: ad.sum_elems(ad.mul(ad.row_softmax(a), w)), [a])


class TestElementwise:
    def test_tanh_at_zero(self):
        assert ad.tanh_elem(ad.constant([[0.0]])).item() == 0.0

    def test_clamp_definition(self):
        out = ad.clamp_elem(ad.constant([[-0.5, 0.3, 1.4]]), 0, 1)
        assert np.array_equal(out.data, [[0.0, 0.3, 1.0]])

    def test_clamp_bad_bounds(self):
        with pytest.raises(ad.AutodiffError):
            ad.clamp_elem(ad.constant([[0.0]]), 1.0, 0.0)

    def test_clamp_gradient_only_inside(self):
        a = ad.Tensor([[-0.5, 0.3, 1.4]], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_elems(ad.clamp_elem(a, 0, 1)))
        assert np.array_equal(a.grad, [[0.0, 1.0, 0.0]])

    def test_tanh_gradient_at_zero(self):
        a = ad.Tensor([[0.0]], requires_grad=True)
        report = check(lambda: ad.tanh_elem(a), [a])
        a.zero_grad()
        with ad.Tape() as tape:
            tape.backward(ad.tanh_elem(a))
        assert a.grad[0, 0] == 1.0
        assert report.passed

    def test_elementwise_gradients(self):
        a = ad.Tensor(rand((2, 4), 6) * 0.5 + 1.5, requires_grad=True)
        w = ad.constant(rand((2, 4), 7))

        def weighted(op):
            return lambda: ad.sum_elems(ad.mul(op(a), w))

        for op in (ad.tanh_elem, ad.exp_elem, ad.log_elem, ad.sigmoid_elem,
                   ad.sqrt_elem, ad.relu_elem):
            check(weighted(op), [a])

    def test_nonfinite_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log_elem(ad.constant([[0.0]]))
        with pytest.raises(ad.NonFiniteError):
            ad.exp_elem(ad.constant([[1e4]]))


class TestLayerNorm:
    def gain_bias(self, d):
        return ad.constant(np.ones((1, d))), ad.constant(np.zeros((1, d)))

    def test_constant_row_is_zeroed(self):
        gain, bias = self.gain_bias(4)
        out = ad.layer_norm(ad.constant([[3.0] * 4]), gain, bias, 1e-5)
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        gain, bias = self.gain_bias(2)
        out = ad.layer_norm(ad.constant([[1.0, -1.0]]), gain, bias, 1e-5)
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert np.allclose(out.data, [[expected, -expected]], atol=1e-12)

    def test_output_moments(self):
        gain, bias = self.gain_bias(8)
        x = rand((1, 8), 8)
        out = ad.layer_norm(ad.constant(x), gain, bias, 1e-5).data
        assert abs(out.mean()) <= 1e-10
        var = x.var()
        assert abs(out.var() - var / (var + 1e-5)) <= 1e-6

    def test_gradient(self):
        a = ad.Tensor(rand((1, 8), 9), requires_grad=True)
        gain = ad.Tensor(rand((1, 8), 10), requires_grad=True)
        bias = ad.Tensor(rand((1, 8), 11), requires_grad=True)
        w = ad.constant(rand((1, 8), 12))
        check(lambda: ad.sum_elems(ad.mul(ad.layer_norm(a, gain, bias, 1e-5), w)),
              [a, gain, bias])


class TestL2Normalize:
    def test_triangle(self):
        out = ad.l2_normalize(ad.constant([[3.0, 4.0]]))
        assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_vector_guard(self):
        out = ad.l2_normalize(ad.constant([[0.0, 0.0]]), eps=1e-12)
        assert np.array_equal(out.data, [[0.0, 0.0]])

    def test_unit_norm(self):
        out = ad.l2_normalize(ad.constant(rand((4, 6), 13)))
        assert np.allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        a = ad.Tensor(rand((1, 6), 14), requires_grad=True)
        w = ad.constant(rand((1, 6), 15))
        check(lambda: ad.sum_elems(ad.mul(ad.l2_normalize(a), w)), [a])

    def test_zero_vector_gradient_is_finite(self):
        a = ad.Tensor([[0.0, 0.0]], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_elems(ad.l2_normalize(a)))
        assert np.all(np.isfinite(a.grad))


class TestBackward:
    def test_sum_gradient(self):
        w = ad.Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_elems(w))
        assert np.array_equal(w.grad, [[1.0, 1.0, 1.0]])

    def test_quadratic_gradient(self):
        w = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum_elems(ad.mul(w, w)))
        assert np.array_equal(w.grad, [[2.0, 4.0]])

    def test_non_scalar_loss_rejected(self):
        w = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        with ad.Tape() as tape:
            out = ad.mul(w, w)
            with pytest.raises(ad.ShapeError):
                tape.backward(out)

    def test_double_backward_doubles_gradients(self):
        w = ad.Tensor(rand((2, 3), 16), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_elems(ad.mul(ad.tanh_elem(w), w))
            tape.backward(loss)
            once = w.grad.copy()
            tape.backward(loss)
        assert np.array_equal(w.grad, 2.0 * once)


class TestStructure:
    def test_concat_slice_roundtrip_gradients(self):
        a = ad.Tensor(rand((2, 3), 17), requires_grad=True)
        b = ad.Tensor(rand((1, 3), 18), requires_grad=True)
        w = ad.constant(rand((3, 3), 19))
        check(lambda: ad.sum_elems(ad.mul(ad.concat_rows([a, b]), w)), [a, b])

        c = ad.Tensor(rand((4, 6), 20), requires_grad=True)
        check(lambda: ad.sum_elems(ad.slice_cols(c, 1, 4)), [c])
        check(lambda: ad.sum_elems(ad.row(c, 2)), [c])

    def test_row_log_softmax_matches_log_of_softmax(self):
        x = ad.constant(rand((3, 4), 21))
        direct = ad.row_log_softmax(x).data
        indirect = np.log(ad.row_softmax(x).data)
        assert np.allclose(direct, indirect, atol=1e-12)

    def test_broadcast_gradients(self):
        a = ad.Tensor(rand((3, 4), 22), requires_grad=True)
        row_vec = ad.Tensor(rand((1, 4), 23), requires_grad=True)
        col_vec = ad.Tensor(rand((3, 1), 24), requires_grad=True)
        scalar = ad.Tensor(rand((1, 1), 25) + 2.0, requires_grad=True)
        check(lambda: ad.sum_elems(ad.div(ad.mul(ad.add(a, row_vec), col_vec), scalar)),
              [a, row_vec, col_vec, scalar])


class TestGradCheck:
    def test_quadratic_is_exact(self):
        w = ad.Tensor(rand((1, 3), 26), requires_grad=True)
        report = ad.grad_check(lambda: ad.matmul(w, ad.transpose(w)), [w],
                               step=1e-5, tol=1e-4)
        assert report.passed
        assert report.max_rel_err < 1e-8

    def test_composed_softmax_matmul(self):
        a = ad.Tensor(rand((2, 3), 27), requires_grad=True)
        b = ad.Tensor(rand((3, 4), 28), requires_grad=True)
        w = ad.constant(rand((2, 4), 29))
        report = ad.grad_check(
            lambda: ad.sum_elems(ad.mul(ad.row_softmax(ad.matmul(a, b)), w)),
            [a, b], step=1e-5, tol=1e-4)
        assert report.passed

    def test_wrong_backward_rule_fails(self):
        w = ad.Tensor([[1.5]], requires_grad=True)

        def bad_square():
            # deliberately wrong rule: claims d(x^2)/dx = 3x
            def backward(g):
                return (g * 3.0 * w.data,)
            return ad._make("bad_square", w.data ** 2, (w,), backward)

        report = ad.grad_check(bad_square, [w], step=1e-5, tol=1e-4)
        assert not report.passed

    def test_invalid_args(self):
        w = ad.Tensor([[1.0]], requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            ad.grad_check(lambda: w, [w], step=0.0)


class TestPrimitiveGradientSweep:
    def test_randomized_shapes(self):
        rng = np.random.default_rng(30)
        for trial in range(5):
            m = int(rng.integers(1, 17))
            n = int(rng.integers(1, 17))
            a = ad.Tensor(rng.normal(size=(m, n)), requires_grad=True)
            w = ad.constant(rng.normal(size=(m, n)))
            report = ad.grad_check(
                lambda: ad.sum_elems(ad.mul(ad.row_softmax(ad.tanh_elem(a)), w)),
                [a], step=1e-5, tol=1e-4)
            assert report.passed, f"trial {trial}: {report.max_rel_err}"
