import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from darkadapt import _kernels

needs_numba = pytest.mark.skipif(not _kernels.NUMBA_AVAILABLE, reason="numba not importable")


@needs_numba
@given(arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.just(3))),
       st.integers(1, 3))
@settings(max_examples=50, deadline=None)
def test_weighted_sums_backends_agree(frames, stride):
    a = _kernels._weighted_sum_numpy(frames, 0.299, 0.587, 0.144, stride)
    b = _kernels._weighted_sum_loop(frames, 0.299, 0.587, 0.144, stride)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


@needs_numba
@given(st.lists(st.one_of(st.floats(-50, 400), st.just(float("nan")), st.just(float("inf"))), max_size=60),
       st.lists(st.floats(0, 300), min_size=2, max_size=12, unique=True))
@settings(max_examples=80, deadline=None)
def test_binning_backends_agree(values, edges):
    edges = np.sort(np.array(edges))
    v = np.array(values, dtype=np.float64)
    assert np.array_equal(_kernels._bin_index_numpy(v, edges), _kernels._bin_index_loop(v, edges))


def test_env_flag_selects_numpy():
    code = "from darkadapt import _kernels; print(_kernels.backend())"
    env = dict(os.environ, DARKADAPT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["DARKADAPT_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("numba" if _kernels.NUMBA_AVAILABLE else "numpy")


def test_nan_goes_to_overflow():
    idx = _kernels.bin_index(np.array([np.nan, 5.0, 10.0]), np.array([0.0, 10.0]))
    assert idx.tolist() == [1, 0, 1]
