"""Hot gather/scatter kernels with a compiled backend and a NumPy fallback.

The compiled extension is used when it imports; set ``VPD_KERNELS=python``
to force the NumPy implementation. :func:`use_backend` switches at runtime
(benchmarks and equivalence tests rely on it).
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FUNCS = ("im2col3d", "col2im3d", "deform_im2col", "deform_col2im")

_active: ModuleType = _pykernels
BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use_backend(name: str) -> None:
    global _active, BACKEND
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _ckernels
    elif name == "python":
        _active = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col3d(x, ksize, stride, pad):
    return _active.im2col3d(x, ksize, stride, pad)


def col2im3d(cols, x_shape, ksize, stride, pad):
    return _active.col2im3d(cols, x_shape, ksize, stride, pad)


def deform_im2col(x, offsets, k, pad, stride=1):
    return _active.deform_im2col(x, offsets, k, pad, stride)


def deform_col2im(dcols, x, offsets, k, pad, stride=1):
    return _active.deform_col2im(dcols, x, offsets, k, pad, stride)


conv_out_size = _pykernels.conv_out_size

_requested = os.environ.get("VPD_KERNELS", "").lower()
if _requested == "python" or _ckernels is None:
    use_backend("python")
else:
    use_backend("cython")
