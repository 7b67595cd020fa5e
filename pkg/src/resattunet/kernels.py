"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``RESATTUNET_KERNELS=python`` to
force the numpy fallback.
"""
import importlib
import os

from . import _kernels_py

_NAMES = (
    "im2col",
    "col2im",
    "maxpool2x2",
    "maxpool2x2_backward",
    "interp_last_axis",
    "interp_last_axis_backward",
)


def load_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("resattunet._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    found = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        found.insert(0, "cython")
    return found


def _select():
    wanted = os.environ.get("RESATTUNET_KERNELS", "").strip().lower()
    if wanted == "python":
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        if wanted == "cython":
            raise
        return "python", _kernels_py


BACKEND, _impl = _select()

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
interp_last_axis = _impl.interp_last_axis
interp_last_axis_backward = _impl.interp_last_axis_backward
