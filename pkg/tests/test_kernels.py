import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baatbench import _accel, kernels

# hand-worked Kuwahara example, radius 1, reflect padding:
#   0 0 9
#   0 0 9
#   9 9 9
# (1,1): top-left quadrant is all zeros -> 0
# (2,2): all four 2x2 quadrants have one 0 and three 9s, tie -> first -> 27/4
# (0,2): every quadrant holds two 0s and two 9s, tie -> first -> 4.5
KUW_IMAGE = np.array([[[0, 0, 9], [0, 0, 9], [9, 9, 9]]], dtype=np.float64)


@pytest.mark.parametrize("impl", [kernels.kuwahara_numpy, kernels.kuwahara_numba])
def test_kuwahara_golden(impl):
    out = impl(KUW_IMAGE, 1)
    assert out[0, 1, 1] == 0.0
    assert out[0, 2, 2] == 6.75
    assert out[0, 0, 2] == 4.5


@pytest.mark.parametrize("impl", [kernels.warp_numpy, kernels.warp_numba])
def test_warp_golden(impl):
    img = np.array([[[0.0, 10.0], [20.0, 30.0]]])
    full = lambda v: np.full((2, 2), float(v))  # noqa: E731
    assert np.all(impl(img, full(0.5), full(0.5)) == 15.0)
    assert np.all(impl(img, full(0), full(0.25)) == 2.5)
    assert np.all(impl(img, full(1), full(5)) == 30.0)  # x clamped to the border
    assert np.all(impl(img, full(-3), full(0.5)) == 5.0)


@pytest.mark.parametrize("impl", [kernels.rbf_group_sums_numpy, kernels.rbf_group_sums_numba])
def test_rbf_golden(impl):
    # distances^2 0, 1, 4 with gamma 1 -> weights 1, e^-1 | e^-4
    log_max, sums = impl(np.zeros((1, 1)), np.array([[0.0], [1.0], [2.0]]), np.array([0, 0, 1]), 2, 1.0)
    assert log_max[0] == 0.0
    np.testing.assert_allclose(sums[0], [1.0 + np.exp(-1.0), np.exp(-4.0)], rtol=1e-15)


def test_rbf_log_shift_survives_underflow():
    q = np.zeros((1, 1))
    pts = np.array([[30.0], [31.0]])
    log_max, sums = kernels.rbf_group_sums(q, pts, np.array([0, 1]), 2, 1.0)
    assert np.all(np.exp(-np.array([900.0, 961.0])) == 0)  # raw weights underflow
    assert log_max[0] == -900.0
    np.testing.assert_allclose(sums[0], [1.0, np.exp(-61.0)])


images = arrays(np.uint8, st.tuples(st.sampled_from([1, 3]), st.integers(5, 12), st.integers(5, 12)))


@settings(max_examples=40, deadline=None)
@given(img=images, radius=st.integers(1, 2))
def test_kuwahara_backends_bit_identical(img, radius):
    if radius >= min(img.shape[1:]) / 2:
        radius = 1
    assert np.array_equal(kernels.kuwahara_numpy(img, radius), kernels.kuwahara_numba(img, radius))


@settings(max_examples=40, deadline=None)
@given(img=images, seed=st.integers(0, 2**16))
def test_warp_backends_agree(img, seed):
    C, H, W = img.shape
    r = np.random.default_rng(seed)
    ys = r.uniform(-2, H + 1, size=(H, W))
    xs = r.uniform(-2, W + 1, size=(H, W))
    a = kernels.warp_numpy(img.astype(np.float64), ys, xs)
    b = kernels.warp_numba(img.astype(np.float64), ys, xs)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), d=st.integers(1, 8), gamma=st.floats(0.01, 50.0))
def test_rbf_backends_agree(seed, d, gamma):
    r = np.random.default_rng(seed)
    q, pts = r.uniform(size=(5, d)), r.uniform(size=(17, d))
    groups = r.integers(0, 3, size=17)
    la, sa = kernels.rbf_group_sums_numpy(q, pts, groups, 3, gamma)
    lb, sb = kernels.rbf_group_sums_numba(q, pts, groups, 3, gamma)
    np.testing.assert_allclose(la, lb, rtol=1e-12)
    np.testing.assert_allclose(sa, sb, rtol=1e-10, atol=1e-300)


def test_backend_flag_selects_numpy():
    code = "from baatbench import _accel; print(_accel.backend_name())"
    env = dict(os.environ, BAATBENCH_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["BAATBENCH_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("numba" if _accel.numba is not None else "numpy")


def test_public_dispatch_matches_reference():
    img = np.random.default_rng(0).integers(0, 256, size=(3, 10, 10)).astype(np.float64)
    assert np.array_equal(kernels.kuwahara(img, 2), kernels.kuwahara_numpy(img, 2))
