import math

import numpy as np
import pytest

from kexpfam.errors import DataError
from kexpfam.kernels import (
    ConstantKernel,
    DerivRequest,
    GaussianKernelSpec,
    eval_kernel,
    kernel_matrix,
    kernel_partial,
    median_heuristic,
    partial_matrix,
)

from conftest import fd_kernel_partial


def random_spec(rng, dim):
    return GaussianKernelSpec(rng.uniform(0.5, 2.5, size=dim))


class TestGaussianKernelSpec:
    def test_rejects_nonpositive_bandwidth(self):
        for bad in ([0.0], [-1.0], [1.0, -0.5]):
            with pytest.raises(DataError):
                GaussianKernelSpec(bad)

    def test_rejects_nonfinite(self):
        for bad in ([np.nan], [np.inf], [1.0, np.nan]):
            with pytest.raises(DataError):
                GaussianKernelSpec(bad)

    def test_rejects_below_floor(self):
        with pytest.raises(DataError):
            GaussianKernelSpec([1e-9])

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            GaussianKernelSpec([])

    def test_bandwidths_frozen(self):
        spec = GaussianKernelSpec([1.0, 2.0])
        with pytest.raises(ValueError):
            spec.bandwidths[0] = 3.0


class TestConstantKernel:
    def test_value_everywhere(self):
        k = ConstantKernel(2.5)
        K = kernel_matrix(k, np.zeros((3, 0)), np.zeros((4, 0)))
        np.testing.assert_array_equal(K, np.full((3, 4), 2.5))

    def test_rejects_nonpositive(self):
        with pytest.raises(DataError):
            ConstantKernel(0.0)


class TestEvalKernel:
    def test_identity_case(self, rng):
        for _ in range(10):
            d = int(rng.integers(1, 5))
            spec = random_spec(rng, d)
            y = rng.normal(size=d)
            assert eval_kernel(spec, y, y) == 1.0

    def test_symmetry(self, rng):
        for _ in range(50):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            assert eval_kernel(spec, y, y2) == eval_kernel(spec, y2, y)

    def test_scalar_closed_form(self):
        # independent evaluation of exp(-0.5)
        spec = GaussianKernelSpec([1.0, 1.0])
        value = eval_kernel(spec, [0.0, 0.0], [1.0, 0.0])
        assert value == pytest.approx(0.60653065971263342, rel=1e-12)
        assert value == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_range(self, rng):
        spec = random_spec(rng, 3)
        for _ in range(50):
            v = eval_kernel(spec, rng.normal(size=3), rng.normal(size=3))
            assert 0.0 < v <= 1.0

    def test_dimension_mismatch(self):
        spec = GaussianKernelSpec([1.0, 1.0])
        with pytest.raises(DataError):
            eval_kernel(spec, [0.0], [0.0, 0.0])

    def test_nonfinite_input(self):
        spec = GaussianKernelSpec([1.0])
        with pytest.raises(DataError):
            eval_kernel(spec, [np.nan], [0.0])


class TestDerivRequest:
    def test_rejects_bad_order(self):
        with pytest.raises(DataError):
            DerivRequest(0, 3, 0, 0)
        with pytest.raises(DataError):
            DerivRequest(0, 0, 0, -1)

    def test_dim_out_of_range_at_call(self):
        spec = GaussianKernelSpec([1.0])
        with pytest.raises(DataError):
            kernel_partial(spec, [0.0], [0.0], DerivRequest(1, 1, 0, 0))


class TestKernelPartial:
    def test_zero_order_equals_eval(self, rng):
        for _ in range(20):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            req = DerivRequest(int(rng.integers(d)), 0, int(rng.integers(d)), 0)
            assert kernel_partial(spec, y, y2, req) == eval_kernel(spec, y, y2)

    def test_odd_derivative_vanishes_at_coincidence(self, rng):
        for _ in range(20):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y = rng.normal(size=d)
            req = DerivRequest(int(rng.integers(d)), 1, 0, 0)
            assert kernel_partial(spec, y, y, req) == 0.0

    def test_first_order_matches_small_step_central_difference(self, rng):
        # the documented 1e-5 step is accurate for single first derivatives
        h = 1e-5
        for _ in range(50):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            i = int(rng.integers(d))
            e = np.zeros(d)
            e[i] = h
            fd = (eval_kernel(spec, y + e, y2) - eval_kernel(spec, y - e, y2)) / (2 * h)
            val = kernel_partial(spec, y, y2, DerivRequest(i, 1, 0, 0))
            assert val == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_all_orders_match_fd_oracle(self, rng):
        for _ in range(150):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            i, j = int(rng.integers(d)), int(rng.integers(d))
            p, q = int(rng.integers(3)), int(rng.integers(3))
            val = kernel_partial(spec, y, y2, DerivRequest(i, p, j, q))
            oracle = fd_kernel_partial(spec, y, y2, i, p, j, q)
            assert val == pytest.approx(oracle, rel=1e-5, abs=1e-8)

    def test_swap_symmetry_with_mirrored_request(self, rng):
        for _ in range(120):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            req = DerivRequest(int(rng.integers(d)), int(rng.integers(3)),
                               int(rng.integers(d)), int(rng.integers(3)))
            a = kernel_partial(spec, y, y2, req)
            b = kernel_partial(spec, y2, y, req.mirrored())
            assert a == pytest.approx(b, rel=1e-12, abs=1e-15)

    def test_difference_antisymmetry(self, rng):
        # d/dy_i k == -d/dy2_i k for a translation-invariant kernel
        for _ in range(50):
            d = int(rng.integers(1, 4))
            spec = random_spec(rng, d)
            y, y2 = rng.normal(size=d), rng.normal(size=d)
            i = int(rng.integers(d))
            a = kernel_partial(spec, y, y2, DerivRequest(i, 1, 0, 0))
            b = kernel_partial(spec, y, y2, DerivRequest(0, 0, i, 1))
            assert a == -b

    def test_product_structure_across_dims(self, rng):
        # for i != j the mixed partial factorizes:
        # k * partial(i,p; j,q) == partial(i,p) * partial(j,q)
        for _ in range(50):
            spec = random_spec(rng, 3)
            y, y2 = rng.normal(size=3), rng.normal(size=3)
            i, j = 0, 2
            p, q = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            k = eval_kernel(spec, y, y2)
            lhs = k * kernel_partial(spec, y, y2, DerivRequest(i, p, j, q))
            rhs = (kernel_partial(spec, y, y2, DerivRequest(i, p, 0, 0))
                   * kernel_partial(spec, y, y2, DerivRequest(0, 0, j, q)))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)
            oracle = fd_kernel_partial(spec, y, y2, i, p, j, q)
            assert kernel_partial(spec, y, y2, DerivRequest(i, p, j, q)) == \
                pytest.approx(oracle, rel=1e-5, abs=1e-8)


class TestVectorizedPaths:
    def test_kernel_matrix_matches_scalar(self, rng):
        spec = random_spec(rng, 2)
        A, B = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
        K = kernel_matrix(spec, A, B)
        for a in range(5):
            for b in range(7):
                assert K[a, b] == pytest.approx(eval_kernel(spec, A[a], B[b]),
                                                rel=1e-14)

    def test_kernel_matrix_transpose_exact(self, rng):
        spec = random_spec(rng, 3)
        A = rng.normal(size=(20, 3))
        K = kernel_matrix(spec, A, A)
        np.testing.assert_array_equal(K, K.T)

    def test_partial_matrix_matches_scalar(self, rng):
        spec = random_spec(rng, 2)
        A, B = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
        for i, p, j, q in [(0, 1, 1, 1), (1, 2, 1, 2), (0, 2, 1, 1), (1, 0, 0, 2)]:
            M = partial_matrix(spec, A, B, i, p, j, q)
            for a in range(4):
                for b in range(6):
                    expect = kernel_partial(spec, A[a], B[b],
                                            DerivRequest(i, p, j, q))
                    assert M[a, b] == pytest.approx(expect, rel=1e-13, abs=1e-15)


class TestMedianHeuristic:
    def test_single_pair(self):
        np.testing.assert_allclose(median_heuristic(np.array([[0.0], [1.0]])), [1.0])

    def test_identical_rows_fallback(self):
        np.testing.assert_allclose(median_heuristic(np.zeros((5, 2))), [1.0, 1.0])

    def test_three_points(self):
        # pairwise diffs {1, 3, 2} -> median 2
        np.testing.assert_allclose(
            median_heuristic(np.array([[0.0], [1.0], [3.0]])), [2.0]
        )

    def test_needs_two_rows(self):
        with pytest.raises(DataError):
            median_heuristic(np.array([[1.0]]))

    def test_brute_force_oracle(self, rng):
        data = rng.normal(size=(30, 3))
        expect = np.empty(3)
        for m in range(3):
            diffs = [abs(data[a, m] - data[b, m])
                     for a in range(30) for b in range(a + 1, 30)]
            expect[m] = np.median(diffs)
        np.testing.assert_allclose(median_heuristic(data), expect, rtol=1e-12)

    def test_zero_median_uses_smallest_positive(self):
        col0 = np.zeros(10)
        col1 = np.arange(10.0)
        out = median_heuristic(np.column_stack([col0, col1]))
        assert out[0] == out[1] > 0

    def test_subsample_deterministic(self, rng):
        data = rng.normal(size=(1500, 2))
        np.testing.assert_array_equal(median_heuristic(data), median_heuristic(data))
