"""Backend selection for the per-pixel numpy kernels.

The compiled ``_ckernels`` module is used when it was built; otherwise (or when
``LAYERSTEREO_PURE_PYTHON=1``) the numpy versions in ``_pykernels`` are used.
Both take float64 arrays with a leading batch axis.
"""
import os

import numpy as np

from . import _pykernels

_native = None
if os.environ.get("LAYERSTEREO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _native
    except ImportError:
        _native = None

BACKEND = "cython" if _native is not None else "numpy"
_impl = _native if _native is not None else _pykernels


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "numpy") or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _pykernels
    if name == "cython":
        if _native is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _native
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def consistency_error(f_lr, f_rl, backend=None):
    return get_backend(backend).consistency_error(_f64(f_lr), _f64(f_rl))


def hwarp(img, disp, backend=None):
    return get_backend(backend).hwarp(_f64(img), _f64(disp))


def median3(img, backend=None):
    return get_backend(backend).median3(_f64(img))
