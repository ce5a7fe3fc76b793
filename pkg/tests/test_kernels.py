import itertools
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debus import _kernels_py, kernels

BACKENDS = kernels.available_backends()


def brute_force_cost(cost):
    n, m = cost.shape
    return min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(m), n))


@pytest.mark.parametrize("name", sorted(BACKENDS))
class TestBackends:
    def test_im2col_matches_reference(self, name):
        impl = BACKENDS[name]
        x = np.random.default_rng(0).normal(size=(2, 3, 7, 6))
        for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            np.testing.assert_array_equal(impl.im2col(x, 3, 3, stride, pad), _kernels_py.im2col(x, 3, 3, stride, pad))

    def test_col2im_is_im2col_adjoint(self, name):
        impl = BACKENDS[name]
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 6, 6))
        cols = impl.im2col(x, 3, 3, 2, 1)
        y = rng.normal(size=cols.shape)
        # <im2col(x), y> == <x, col2im(y)>
        lhs = float((cols * y).sum())
        rhs = float((x * impl.col2im(y, x.shape, 3, 3, 2, 1)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_float32_supported(self, name):
        impl = BACKENDS[name]
        x = np.random.default_rng(2).normal(size=(1, 2, 5, 5)).astype(np.float32)
        out = impl.im2col(x, 3, 3, 1, 1)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, _kernels_py.im2col(x, 3, 3, 1, 1))

    def test_hungarian_brute_force(self, name):
        impl = BACKENDS[name]
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 6))
            m = int(rng.integers(n, 7))
            cost = rng.random((n, m))
            cols = impl.linear_sum_assignment(cost)
            assert len(set(cols.tolist())) == n
            assert cost[np.arange(n), cols].sum() == pytest.approx(brute_force_cost(cost), abs=1e-12)

    def test_greedy_match(self, name):
        impl = BACKENDS[name]
        iou = np.array([[0.9, 0.6], [0.8, 0.2], [0.4, 0.7]])
        np.testing.assert_array_equal(impl.greedy_match(iou, 0.5), [0, -1, 1])
        np.testing.assert_array_equal(impl.greedy_match(iou, 0.95), [-1, -1, -1])

    def test_greedy_tie_prefers_lower_gt(self, name):
        impl = BACKENDS[name]
        np.testing.assert_array_equal(impl.greedy_match(np.array([[0.7, 0.7]]), 0.5), [0])


def test_backend_selection_env_override():
    code = "import debus.kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"DEBUS_PURE_PYTHON": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_compiled_backend_present():
    assert "cython" in BACKENDS
    assert kernels.BACKEND == "cython"


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**16), st.floats(-10, 10))
def test_hungarian_backends_agree_and_shift_invariant(n, extra, seed, shift):
    cost = np.random.default_rng(seed).random((n, n + extra))
    a = _kernels_py.linear_sum_assignment(cost)
    for impl in BACKENDS.values():
        b = impl.linear_sum_assignment(cost + shift)
        assert cost[np.arange(n), b].sum() == pytest.approx(cost[np.arange(n), a].sum(), abs=1e-9)
