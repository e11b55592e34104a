"""Kernel backend selection.

The package ships two interchangeable implementations of the convolution
packing kernels: a compiled Cython extension (rmsda._kernels) and a NumPy
fallback (rmsda._kernels_py) that produces bitwise identical results. The
compiled one is preferred when importable.

Selection happens once at import and can be forced with the environment
variable RMSDA_BACKEND=auto|compiled|python, or at runtime (tests, the
benchmark) via set_backend().
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_active = None
_active_name = ""


def has_compiled() -> bool:
    return _compiled is not None


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the name actually in effect."""
    global _active, _active_name
    if name == "auto":
        name = "compiled" if _compiled is not None else "python"
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "compiled kernels are not available; rebuild the package "
                "with Cython and a C compiler or use RMSDA_BACKEND=python"
            )
        _active = _compiled
    elif name == "python":
        _active = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}; expected auto, compiled or python")
    _active_name = name
    return name


def backend_name() -> str:
    return _active_name


def im2col(xpad, k, stride, oh, ow):
    return _active.im2col(xpad, k, stride, oh, ow)


def col2im(col, hp, wp, k, stride, oh, ow):
    return _active.col2im(col, hp, wp, k, stride, oh, ow)


set_backend(os.environ.get("RMSDA_BACKEND", "auto"))
