"""Discretization and the 1D recurrence: kernels, adjoints, properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changescan import scan1d, tensor as T
from conftest import check_grads


def random_steps(rng, L, lanes=(), lo=0.1, hi=0.95):
    a = rng.uniform(lo, hi, size=(L,) + lanes)
    b = rng.standard_normal((L,) + lanes)
    return a, b


class TestDiscretize:
    def test_large_negative_bias_freezes_state(self, rng):
        C, N = 3, 2
        params = scan1d.init_ssm_params(C, N, rng)
        params.b_delta.data[:] = -40.0
        x = T.Tensor(np.zeros((5, C)))
        steps, _ = scan1d.discretize(params, x)
        np.testing.assert_allclose(steps.a_bar.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(steps.bx.data, 0.0, atol=1e-12)

    def test_zero_delta_is_identity_transition(self, rng):
        # forced delta = 0 exactly: a_bar = 1, bx = 0, so h never moves
        L, lanes = 6, (2, 3)
        a = np.ones((L,) + lanes)
        b = np.zeros((L,) + lanes)
        a[0] = 0.5
        b[0] = 1.7
        h = scan1d.scan_sequential(a, b)
        for t in range(1, L):
            np.testing.assert_array_equal(h[t], h[0])

    def test_a_bar_strictly_inside_unit_interval(self, rng):
        params = scan1d.init_ssm_params(4, 2, rng)
        x = T.Tensor(rng.standard_normal((1000, 4)))
        steps, _ = scan1d.discretize(params, x)
        assert np.all(steps.a_bar.data > 0.0)
        assert np.all(steps.a_bar.data < 1.0)

    def test_nonfinite_projection_raises(self, rng):
        params = scan1d.init_ssm_params(2, 2, rng)
        x = T.Tensor(np.full((3, 2), np.inf))
        with np.errstate(invalid="ignore"), pytest.raises(T.NumericError):
            scan1d.discretize(params, x)

    def test_shapes(self, rng):
        params = scan1d.init_ssm_params(5, 3, rng)
        steps, c_seq = scan1d.discretize(params, T.Tensor(rng.standard_normal((7, 5))))
        assert steps.a_bar.shape == (7, 5, 3)
        assert steps.bx.shape == (7, 5, 3)
        assert c_seq.shape == (7, 3)


class TestSequentialKernel:
    def test_single_step_is_injected_value(self, rng):
        a, b = random_steps(rng, 1, (4,))
        np.testing.assert_array_equal(scan1d.scan_sequential(a, b), b)

    def test_constant_coefficients_unroll(self):
        a = np.full((3,), 0.5)
        b = np.full((3,), 2.0)
        h = scan1d.scan_sequential(a, b)
        # h3 = a^2 b + a b + b by unrolling
        np.testing.assert_allclose(h[2], 0.25 * 2.0 + 0.5 * 2.0 + 2.0)

    def test_unit_decay_is_prefix_sum(self, rng):
        b = rng.standard_normal((10, 3))
        h = scan1d.scan_sequential(np.ones_like(b), b)
        np.testing.assert_allclose(h, np.cumsum(b, axis=0), rtol=1e-12)


class TestParallelKernel:
    @pytest.mark.parametrize("L", [1, 2, 3, 7, 64, 1000])
    def test_matches_sequential_64bit(self, rng, L):
        a, b = random_steps(rng, L, (2, 3))
        seq = scan1d.scan_sequential(a, b)
        par = scan1d.scan_parallel(a, b, chunk=64)
        denom = np.abs(seq).max() + 1e-30
        assert np.abs(par - seq).max() / denom < 1e-12

    @pytest.mark.parametrize("L", [7, 64, 129, 1000])
    def test_matches_sequential_32bit(self, rng, L):
        a, b = random_steps(rng, L, (4,))
        a32, b32 = a.astype(np.float32), b.astype(np.float32)
        seq = scan1d.scan_sequential(a32, b32)
        par = scan1d.scan_parallel(a32, b32, chunk=16)
        denom = np.abs(seq).max() + 1e-30
        assert np.abs(par - seq).max() / denom < 1e-6

    def test_chunk_edge_cases(self, rng):
        a, b = random_steps(rng, 130, ())
        for chunk in (1, 2, 63, 65, 130, 500):
            got = scan1d.scan_parallel(a, b, chunk=chunk)
            np.testing.assert_allclose(got, scan1d.scan_sequential(a, b),
                                       rtol=1e-12)

    def test_combine_associative(self, rng):
        for _ in range(50):
            s1, s2, s3 = (tuple(rng.standard_normal(2)) for _ in range(3))
            left = scan1d.combine(scan1d.combine(s1, s2), s3)
            right = scan1d.combine(s1, scan1d.combine(s2, s3))
            np.testing.assert_allclose(left, right, atol=1e-14)

    def test_combine_identity(self, rng):
        s = (0.7, 1.3)
        assert scan1d.combine((1.0, 0.0), s) == s
        assert scan1d.combine(s, (1.0, 0.0)) == s


@given(st.integers(1, 200), st.integers(1, 64))
@settings(max_examples=40, deadline=None)
def test_parallel_equals_sequential_any_length(L, chunk):
    rng = np.random.default_rng(L * 1000 + chunk)
    a = rng.uniform(0.0, 1.0, size=(L, 2))
    b = rng.standard_normal((L, 2))
    np.testing.assert_allclose(scan1d.scan_parallel(a, b, chunk=chunk),
                               scan1d.scan_sequential(a, b), rtol=1e-10,
                               atol=1e-12)


@given(st.integers(2, 80))
@settings(max_examples=40, deadline=None)
def test_states_bounded_by_geometric_series(L):
    rng = np.random.default_rng(L)
    a = rng.uniform(0.05, 0.9, size=(L, 3))
    b = rng.standard_normal((L, 3))
    h = scan1d.scan_sequential(a, b)
    bound = np.abs(b).max() / (1.0 - a.max()) + 1e-9
    assert np.abs(h).max() <= bound


class TestAggregate:
    def test_unit_vector_selects_state(self, rng):
        h = T.Tensor(rng.standard_normal((4, 2, 3)))
        c = np.zeros((4, 3))
        c[:, 0] = 1.0
        y = scan1d.aggregate_output(h, T.Tensor(c))
        np.testing.assert_allclose(y.data, h.data[:, :, 0], rtol=1e-6)

    def test_zero_readout(self, rng):
        h = T.Tensor(rng.standard_normal((4, 2, 3)))
        y = scan1d.aggregate_output(h, T.Tensor(np.zeros((4, 3))))
        np.testing.assert_array_equal(y.data, np.zeros((4, 2)))

    def test_matches_explicit_dot(self, rng):
        h = rng.standard_normal((5, 2, 3))
        c = rng.standard_normal((5, 3))
        y = scan1d.aggregate_output(T.Tensor(h), T.Tensor(c))
        want = np.einsum("lcn,ln->lc", h, c)
        np.testing.assert_allclose(y.data, want, rtol=1e-5)


class TestScanGradients:
    @pytest.mark.parametrize("parallel", [False, True])
    def test_adjoint_matches_finite_differences(self, rng, parallel):
        L, lanes = 9, (2,)
        a, b = random_steps(rng, L, lanes)
        m = rng.standard_normal((L,) + lanes)
        check_grads(
            lambda ta, tb: (scan1d.scan(ta, tb, parallel=parallel, chunk=4)
                            * T.Tensor(m)).sum(),
            [a, b], rel_tol=1e-6)

    def test_mismatched_shapes_rejected(self, rng):
        with pytest.raises(T.ShapeError):
            scan1d.scan(T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((3, 4))))

    def test_full_pipeline_gradient(self, rng):
        # gradients reach every parameter of the discretization
        C, N, L = 3, 2, 5
        x = rng.standard_normal((L, C))

        def build(log_a, w_b, w_c, w_delta, b_delta, tx):
            params = scan1d.SsmParams(log_a, w_b, w_c, w_delta, b_delta)
            y = scan1d.selective_scan(params, tx, parallel=False)
            return (y * y).sum()

        with T.precision(np.float64):
            p = scan1d.init_ssm_params(C, N, np.random.default_rng(3))
        arrays = [p.log_a.data, p.w_b.data, p.w_c.data, p.w_delta.data,
                  p.b_delta.data, x]
        check_grads(build, arrays, rel_tol=1e-5)

    def test_suffix_freeze_blocks_gradient_flow(self, rng):
        # frozen suffix: values there cannot influence the loss on the prefix
        L = 8
        a = rng.uniform(0.2, 0.9, size=(L, 1))
        b = rng.standard_normal((L, 1))
        a[4:] = 1.0
        b[4:] = 0.0
        ta, tb = T.parameter(a), T.parameter(b)
        with T.Tape() as tape:
            h = scan1d.scan(ta, tb, parallel=False)
            loss = T.slice_axis(h, 0, 0, 4).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(tb.grad[4:], 0.0)


def test_selective_scan_suffix_state_frozen(rng):
    # delta forced to zero on the tail: states stop evolving there
    C, N = 2, 2
    params = scan1d.init_ssm_params(C, N, rng)
    x = T.Tensor(rng.standard_normal((10, C)))
    steps, _ = scan1d.discretize(params, x)
    a = steps.a_bar.data.copy()
    b = steps.bx.data.copy()
    a[6:] = 1.0
    b[6:] = 0.0
    h = scan1d.scan_sequential(a, b)
    for t in range(6, 10):
        np.testing.assert_array_equal(h[t], h[5])
