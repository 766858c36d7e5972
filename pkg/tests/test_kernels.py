"""Both kernel backends agree bit-for-bit and match the slow oracles."""
import os

import numpy as np
import pytest

from ssfl import kernels
from oracles import flood_fill_holes, naive_min_filter

BACKENDS = ["numpy", "numba"]


def _fn(name, backend):
    return getattr(kernels, f"{name}_{backend}")


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_min_filter_backend_vs_oracle(backend, k, rng):
    img = rng.random((17, 23))
    assert np.array_equal(_fn("min_filter", backend)(img, k), naive_min_filter(img, k))


@pytest.mark.parametrize("backend", BACKENDS)
def test_fill_holes_backend_vs_oracle(backend, rng):
    for _ in range(50):
        m = rng.random((20, 20)) < rng.uniform(0.2, 0.8)
        assert np.array_equal(_fn("fill_holes", backend)(m), flood_fill_holes(m))


@pytest.mark.parametrize("shape", [(1, 3, 10, 10), (2, 8, 9, 7), (4, 3, 100, 100)])
def test_im2col_backends_identical(shape, rng):
    x = rng.standard_normal(shape)
    a = kernels.im2col_numpy(x, 3, 2, 1)
    b = kernels.im2col_numba(x, 3, 2, 1)
    assert a.shape == b.shape
    assert np.array_equal(a, b)


def test_im2col_values(rng):
    x = rng.standard_normal((1, 2, 5, 6))
    cols = kernels.im2col_numpy(x, 3, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for oi in range(cols.shape[4]):
        for oj in range(cols.shape[5]):
            patch = xp[0, :, 2 * oi:2 * oi + 3, 2 * oj:2 * oj + 3]
            assert np.array_equal(cols[0, :, :, :, oi, oj], patch)


@pytest.mark.parametrize("shape", [(1, 3, 10, 10), (2, 8, 9, 7), (3, 3, 100, 100)])
def test_col2im_is_adjoint_of_im2col(shape, rng):
    x = rng.standard_normal(shape)
    cols = kernels.im2col_numpy(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    for backend in BACKENDS:
        back = _fn("col2im", backend)(y, shape, 3, 2, 1)
        assert np.sum(cols * y) == pytest.approx(np.sum(x * back), rel=1e-12)


def test_col2im_backends_identical(rng):
    shape = (2, 8, 50, 50)
    cols = rng.standard_normal((2, 8, 3, 3, 25, 25))
    assert np.array_equal(kernels.col2im_numpy(cols, shape, 3, 2, 1),
                          kernels.col2im_numba(cols, shape, 3, 2, 1))


@pytest.mark.parametrize("flag", ["numpy", "numba"])
def test_backend_env_flag(flag):
    import subprocess
    import sys
    code = ("import numpy as np, ssfl, ssfl.kernels as k;"
            "from ssfl.preprocess import slice_areas;"
            "from ssfl.phantom import generate_phantom;"
            "v, _ = generate_phantom();"
            "print(ssfl.BACKEND, sum(slice_areas(v.slices)))")
    env = {**os.environ, "SSFL_BACKEND": flag}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    assert out[0] == flag
    from ssfl.phantom import generate_phantom
    from ssfl.preprocess import slice_areas
    v, _ = generate_phantom()
    assert int(out[1]) == sum(slice_areas(v.slices))


def test_bad_backend_flag():
    import subprocess
    import sys
    env = {**os.environ, "SSFL_BACKEND": "gpu"}
    res = subprocess.run([sys.executable, "-c", "import ssfl"], env=env, capture_output=True, text=True)
    assert res.returncode != 0 and "SSFL_BACKEND" in res.stderr
