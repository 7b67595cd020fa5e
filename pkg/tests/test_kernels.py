import os
import subprocess
import sys

import numpy as np
import pytest

from resattunet import kernels
from resattunet import _kernels_py as py
from resattunet.ops import _align_corners_taps

BACKENDS = kernels.available_backends()
needs_ext = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert kernels.load_backend("python") is py
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


def test_env_forces_fallback():
    env = dict(os.environ, RESATTUNET_KERNELS="python")
    out = subprocess.run(
        [sys.executable, "-c", "import resattunet; print(resattunet.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (1, 3)])
def test_im2col_col2im_bitwise(dtype, stride, pad):
    cy = kernels.load_backend("cython")
    r = np.random.default_rng(0)
    H = 9 if stride == 2 else 8
    x = r.standard_normal((2, 3, H, H)).astype(dtype)
    k = 7 if pad == 3 else 3
    a, b = py.im2col(x, k, k, stride, pad), cy.im2col(x, k, k, stride, pad)
    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    g = r.standard_normal(a.shape).astype(dtype)
    a, b = py.col2im(g, 3, H, H, k, k, stride, pad), cy.col2im(g, 3, H, H, k, k, stride, pad)
    assert a.tobytes() == b.tobytes()


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_maxpool_bitwise(dtype):
    cy = kernels.load_backend("cython")
    r = np.random.default_rng(1)
    x = r.integers(-2, 3, size=(2, 3, 6, 8)).astype(dtype)  # plenty of ties
    (oa, ia), (ob, ib) = py.maxpool2x2(x), cy.maxpool2x2(x)
    assert oa.tobytes() == ob.tobytes() and np.array_equal(ia, ib)
    g = r.standard_normal(oa.shape).astype(dtype)
    assert py.maxpool2x2_backward(g, ia).tobytes() == cy.maxpool2x2_backward(g, ib).tobytes()


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_interp_bitwise(dtype):
    cy = kernels.load_backend("cython")
    r = np.random.default_rng(2)
    x = r.standard_normal((2, 3, 5, 7)).astype(dtype)
    i0, i1, w0, w1 = _align_corners_taps(7, 14, dtype)
    a, b = py.interp_last_axis(x, i0, i1, w0, w1), cy.interp_last_axis(x, i0, i1, w0, w1)
    assert a.tobytes() == b.tobytes()
    g = r.standard_normal(a.shape).astype(dtype)
    a = py.interp_last_axis_backward(g, i0, i1, w0, w1, 7)
    b = cy.interp_last_axis_backward(g, i0, i1, w0, w1, 7)
    assert a.tobytes() == b.tobytes()


@needs_ext
def test_model_forward_identical_across_backends():
    prog = (
        "import numpy as np, resattunet as r;"
        "m = r.ResAttUNet(r.ModelConfig(in_bands=3, num_classes=4, stage_widths=[4, 8]), seed=1);"
        "x = r.Tensor(np.random.default_rng(0).standard_normal((1, 3, 16, 16)));"
        "print(m(x).data.tobytes().hex())"
    )
    outs = []
    for name in ("python", "cython"):
        env = dict(os.environ, RESATTUNET_KERNELS=name)
        outs.append(subprocess.run([sys.executable, "-c", prog], env=env, capture_output=True,
                                   text=True, check=True).stdout)
    assert outs[0] == outs[1]


@needs_ext
def test_im2col_parity_sweep_small_extents():
    cy = kernels.load_backend("cython")
    r = np.random.default_rng(3)
    for _ in range(200):
        k = int(r.choice([1, 3, 5, 7]))
        stride = int(r.integers(1, 4))
        pad = int(r.integers(0, k // 2 + 2))
        H, W = (int(v) for v in r.integers(1, 9, size=2))
        if H + 2 * pad < k or W + 2 * pad < k:
            continue
        x = r.standard_normal((1, 2, H, W))
        a, b = py.im2col(x, k, k, stride, pad), cy.im2col(x, k, k, stride, pad)
        assert a.tobytes() == b.tobytes(), (k, stride, pad, H, W)
        g = r.standard_normal(a.shape)
        assert py.col2im(g, 2, H, W, k, k, stride, pad).tobytes() == cy.col2im(g, 2, H, W, k, k, stride, pad).tobytes()
