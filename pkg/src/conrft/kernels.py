"""Kernel backend selection: compiled extension when available, numpy otherwise.

Set CONRFT_KERNELS=python or =cython to force a backend; the default (auto)
prefers the compiled one. All public functions accept arrays of any shape;
the elementwise work runs on flat contiguous views.
"""

import os

import numpy as np

from . import _kernels_py

_FORCE = os.environ.get("CONRFT_KERNELS", "auto").lower()

if _FORCE in ("auto", "cython"):
    try:
        from . import _speedups as _impl
        BACKEND = "cython"
    except ImportError:
        if _FORCE == "cython":
            raise
        _impl = _kernels_py
        BACKEND = "python"
elif _FORCE == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    raise ValueError(f"unknown CONRFT_KERNELS value: {_FORCE!r}")


def _flat(a):
    if not a.flags.c_contiguous:
        raise ValueError("kernel arrays must be C-contiguous")
    return a.reshape(-1)


def mish(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _impl.mish(_flat(x), _flat(out))
    return out


def mish_vjp(x, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gx = np.empty_like(x)
    _impl.mish_vjp(_flat(x), _flat(gy), _flat(gx))
    return gx


def adam_step(p, g, m, v, lr, beta1, beta2, eps, step):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    _impl.adam_step(_flat(p), _flat(g), _flat(m), _flat(v),
                    lr, beta1, beta2, eps, bc1, bc2)


def polyak(target, online, tau):
    _impl.polyak(_flat(target), _flat(online), tau)
