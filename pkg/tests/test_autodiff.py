import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevsim import autodiff as ad
from bevsim.autodiff import Tensor


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestElementwise:
    def test_add(self):
        out = ad.add(t([1.0, 2.0]), t([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_mul_by_zero_annihilates_and_zero_grad(self):
        x = t([1.5, -2.0])
        out = ad.tsum(ad.mul(x, 0.0))
        ad.backward(out)
        assert np.array_equal(out.data, 0.0)
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_square_derivative(self):
        x = t([3.0])
        ad.backward(ad.tsum(ad.square(x)))
        assert x.grad[0] == pytest.approx(6.0)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            ad.add(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_scalar_broadcast_allowed(self):
        out = ad.add(t([[1.0, 2.0]]), t([10.0]))
        assert np.array_equal(out.data, [[11.0, 12.0]])

    @pytest.mark.parametrize("fn", [ad.exp, ad.log, ad.relu, ad.sigmoid, ad.tanh, ad.square])
    def test_unary_gradients_match_finite_differences(self, fn):
        rng = np.random.default_rng(3)
        x = t(rng.uniform(0.2, 1.8, size=(3, 4)))
        report = ad.finite_diff_check(lambda v: ad.tsum(fn(v)), x)
        assert report.passed, report.max_rel_err

    def test_clip_gradient_zero_outside_range(self):
        x = t([-1.0, 0.5, 2.0])
        ad.backward(ad.tsum(ad.clip(x, 0.0, 1.0)))
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_abspow_matches_fd(self):
        x = t(np.array([0.7, -1.3, 0.2]))
        report = ad.finite_diff_check(lambda v: ad.tsum(ad.abspow(v, 2.0)), x)
        assert report.passed


class TestMatmul:
    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        out = ad.matmul(t(a), t(np.eye(3)))
        assert np.array_equal(out.data, a)

    def test_hand_product(self):
        out = ad.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_inner_mismatch_rejected(self):
        with pytest.raises(ValueError, match="inner extents"):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 2))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a = t(rng.normal(size=(4, 5)))
        b = t(rng.normal(size=(5, 3)))
        ra = ad.finite_diff_check(lambda v: ad.tsum(ad.matmul(v, b)), a, rel_tol=1e-6)
        rb = ad.finite_diff_check(lambda v: ad.tsum(ad.matmul(a, v)), b, rel_tol=1e-6)
        assert ra.passed and rb.passed


class TestConv2d:
    def test_1x1_identity_mix(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(3, 5, 5)))
        w = t(np.eye(3).reshape(3, 3, 1, 1))
        out = ad.conv2d(x, w)
        assert np.allclose(out.data, x.data)

    def test_all_ones_center_sum(self):
        x = t(np.ones((1, 3, 3)))
        w = t(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, stride=1, pad=1)
        assert out.data[0, 1, 1] == 9.0

    def test_output_size_formula(self):
        x = t(np.zeros((2, 9, 11)))
        w = t(np.zeros((4, 2, 3, 3)))
        out = ad.conv2d(x, w, stride=2, pad=1)
        assert out.shape == (4, 5, 6)

    def test_non_integer_output_rejected(self):
        with pytest.raises(ValueError, match="not an integer"):
            ad.conv2d(t(np.zeros((1, 6, 6))), t(np.zeros((1, 1, 3, 3))), stride=2, pad=0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(size=(2, 4, 4)))
        w = t(rng.normal(size=(3, 2, 3, 3)))
        rx = ad.finite_diff_check(lambda v: ad.tsum(ad.square(ad.conv2d(v, w, 1, 1))), x, rel_tol=1e-6)
        rw = ad.finite_diff_check(lambda v: ad.tsum(ad.square(ad.conv2d(x, v, 1, 1))), w, rel_tol=1e-6)
        assert rx.passed and rw.passed

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        xb = rng.normal(size=(3, 2, 7, 7))
        w = t(rng.normal(size=(4, 2, 3, 3)))
        out = ad.conv2d(t(xb), w, stride=2, pad=1)
        for i in range(3):
            single = ad.conv2d(t(xb[i]), w, stride=2, pad=1)
            assert np.array_equal(out.data[i], single.data)

    def test_avg_pool2(self):
        x = t(np.arange(16.0).reshape(1, 1, 4, 4))
        out = ad.avg_pool2(x)
        assert np.array_equal(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])
        assert ad.finite_diff_check(
            lambda v: ad.tsum(ad.square(ad.avg_pool2(v))), x).passed


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(t([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_large_inputs_stable(self):
        out = ad.softmax(t([1000.0, 1000.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_hand_value(self):
        out = ad.softmax(t([0.0, np.log(3.0)]), axis=0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=-300, max_value=300), min_size=1, max_size=8))
    def test_sums_to_one(self, vals):
        out = ad.softmax(t(vals), axis=0)
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert (out.data > 0).all()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = t(rng.normal(size=(3, 5)))
        c = rng.normal(size=(3, 5))
        report = ad.finite_diff_check(
            lambda v: ad.tsum(ad.mul(ad.softmax(v, axis=1), Tensor(c))), x)
        assert report.passed


class TestBilinearSample:
    def test_cell_center_exact(self):
        f = t(np.arange(12.0).reshape(1, 3, 4))
        pts = Tensor(np.array([[(1 + 0.5) / 4, (2 + 0.5) / 3]]))
        out = ad.bilinear_sample(f, pts)
        assert out.data[0, 0] == f.data[0, 2, 1]

    def test_midpoint_linear(self):
        f = t(np.array([[[0.0, 4.0]]]))  # (1,1,2)
        pts = Tensor(np.array([[0.5, 0.5]]))  # between the two cells
        out = ad.bilinear_sample(f, pts)
        assert out.data[0, 0] == 2.0

    def test_linear_along_axis(self):
        f = t(np.array([[[1.0, 3.0, 7.0]]]))
        for alpha in (0.25, 0.5, 0.75):
            u = (0.5 + alpha) / 3.0  # between cells 0 and 1
            out = ad.bilinear_sample(f, Tensor(np.array([[u, 0.5]])))
            assert out.data[0, 0] == pytest.approx(1.0 + 2.0 * alpha, abs=1e-12)

    def test_border_clamp(self):
        f = t(np.array([[[5.0, 9.0]]]))
        out = ad.bilinear_sample(f, Tensor(np.array([[0.0, 0.5], [1.0, 0.5]])))
        assert np.allclose(out.data[:, 0], [5.0, 9.0])

    def test_coordinate_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        f = Tensor(rng.normal(size=(2, 5, 6)))
        pts = t(rng.uniform(0.15, 0.85, size=(7, 2)))
        report = ad.finite_diff_check(
            lambda v: ad.tsum(ad.square(ad.bilinear_sample(f, v))), pts, rel_tol=1e-5)
        assert report.passed

    def test_map_gradients_match_fd(self):
        rng = np.random.default_rng(6)
        f = t(rng.normal(size=(2, 4, 4)))
        pts = Tensor(rng.uniform(0.1, 0.9, size=(6, 2)))
        report = ad.finite_diff_check(
            lambda v: ad.tsum(ad.square(ad.bilinear_sample(v, pts))), f)
        assert report.passed


def brute_force_scatter(values, index, n_cells):
    out = np.zeros((n_cells, values.shape[1]))
    for cell in range(n_cells):
        for p in range(values.shape[0]):
            if index[p] == cell:
                out[cell] += values[p]
    return out


class TestScatterAdd:
    def test_two_points_same_cell(self):
        out = ad.scatter_add(t([[1.0], [2.0]]), [3, 3], 5)
        assert out.data[3, 0] == 3.0
        assert out.data.sum() == 3.0

    def test_empty_input(self):
        out = ad.scatter_add(Tensor(np.zeros((0, 4))), np.zeros(0, dtype=np.int64), 6)
        assert np.array_equal(out.data, np.zeros((6, 4)))

    def test_out_of_range_rejected_with_index(self):
        with pytest.raises(ValueError, match="7"):
            ad.scatter_add(t(np.ones((2, 1))), [0, 7], 5)

    def test_matches_brute_force_bitwise(self):
        rng = np.random.default_rng(7)
        vals = rng.normal(size=(100, 3))
        idx = rng.integers(0, 12, size=100)
        out = ad.scatter_add(Tensor(vals), idx, 12)
        # identical summation order (ascending point index) -> bitwise equal
        ref = np.zeros((12, 3))
        for p in range(100):
            ref[idx[p]] += vals[p]
        assert np.array_equal(out.data, ref)
        assert np.allclose(out.data, brute_force_scatter(vals, idx, 12), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=60), st.integers(min_value=1, max_value=9))
    def test_property_matches_brute_force(self, n_points, n_cells):
        rng = np.random.default_rng(n_points * 31 + n_cells)
        vals = rng.normal(size=(n_points, 2))
        idx = rng.integers(0, n_cells, size=n_points)
        out = ad.scatter_add(Tensor(vals), idx, n_cells)
        assert np.allclose(out.data, brute_force_scatter(vals, idx, n_cells), atol=1e-12)

    def test_gradient_routes_back(self):
        vals = t([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = ad.scatter_add(vals, [1, 1, 0], 3)
        ad.backward(ad.tsum(ad.mul(out, Tensor([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]]))))
        assert np.array_equal(vals.grad, [[2.0, 2.0], [2.0, 2.0], [1.0, 1.0]])


class TestSegmentMax:
    def test_max_and_empty_cells(self):
        vals = t([[1.0, 5.0], [3.0, 2.0]])
        out = ad.segment_max(vals, [1, 1], 3)
        assert np.array_equal(out.data, [[0.0, 0.0], [3.0, 5.0], [0.0, 0.0]])

    def test_gradient_goes_to_argmax(self):
        vals = t([[1.0], [3.0], [2.0]])
        out = ad.segment_max(vals, [0, 0, 0], 1)
        ad.backward(ad.tsum(out))
        assert np.array_equal(vals.grad, [[0.0], [1.0], [0.0]])


class TestBackward:
    def test_identity(self):
        x = t([2.0])
        ad.backward(ad.tsum(x * 1.0))
        assert x.grad[0] == 1.0

    def test_fanout_accumulates(self):
        x = t([2.0])
        ad.backward(ad.tsum(ad.add(x, x)))
        assert x.grad[0] == 2.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(t([1.0, 2.0]))

    def test_one_backward_per_graph(self):
        x = t([1.0])
        y = ad.square(x)
        loss = ad.tsum(y)
        ad.backward(loss)
        with pytest.raises(RuntimeError):
            ad.backward(ad.tsum(ad.mul(y, 2.0)))

    def test_backward_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = t(rng.normal(size=(4, 4)))
            w = t(rng.normal(size=(4, 4)))
            loss = ad.tsum(ad.square(ad.relu(ad.matmul(x, w))))
            ad.backward(loss)
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_no_grad_blocks_recording(self):
        x = t([1.0])
        with ad.no_grad():
            y = ad.square(x)
        assert not y.requires_grad


class TestShapeOps:
    def test_take_concat_stack_transpose_fd(self):
        rng = np.random.default_rng(12)
        x = t(rng.normal(size=(3, 4)))

        def fn(v):
            a = ad.transpose(v, (1, 0))
            b = ad.take(a, [0, 2, 2], axis=0)
            c = ad.concat([b, b], axis=1)
            d = ad.stack([c, c], axis=0)
            return ad.tsum(ad.square(d))

        assert ad.finite_diff_check(fn, x).passed

    def test_broadcast_to_fd(self):
        x = t(np.random.default_rng(13).normal(size=(1, 3)))
        fn = lambda v: ad.tsum(ad.square(ad.broadcast_to(v, (4, 2, 3))))
        assert ad.finite_diff_check(fn, x).passed

    def test_sum_axis_tuple(self):
        x = t(np.arange(24.0).reshape(2, 3, 4))
        out = ad.tsum(x, axis=(1, 2))
        assert np.array_equal(out.data, x.data.sum(axis=(1, 2)))
        ad.backward(ad.tsum(ad.square(out)))
        assert x.grad.shape == (2, 3, 4)


class TestFiniteDiffCheck:
    def test_square_at_three(self):
        x = t([3.0])
        report = ad.finite_diff_check(lambda v: ad.tsum(ad.square(v)), x)
        assert report.passed
        assert report.entries[0][1] == pytest.approx(6.0)
        assert report.entries[0][2] == pytest.approx(6.0, rel=1e-6)

    def test_constant_function_zero_error(self):
        x = t([1.0, 2.0])
        report = ad.finite_diff_check(lambda v: Tensor(5.0) * 1.0, x)
        assert report.passed and report.max_rel_err == 0.0

    def test_sampling_limits_probes(self):
        x = t(np.random.default_rng(0).normal(size=(10, 10)))
        report = ad.finite_diff_check(lambda v: ad.tsum(ad.square(v)), x, sample=7)
        assert report.n_checked == 7 and report.passed
