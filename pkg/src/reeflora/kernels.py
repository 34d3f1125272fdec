"""Kernel backend selection.

The compiled extension ``reeflora._ckernels`` is used when it imports; the
numpy module ``reeflora._pykernels`` otherwise. Set ``REEF_LORA_KERNELS=python``
to force the fallback (the benchmark and the backend-agreement tests use both
explicitly through :func:`backend`).
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels

if os.environ.get("REEF_LORA_KERNELS", "").lower() == "python" or _ckernels is None:
    ACTIVE = "python"
else:
    ACTIVE = "compiled"

_impl: ModuleType = BACKENDS[ACTIVE]


def backend(name: str | None = None) -> ModuleType:
    """Return a kernel module by name, or the active one."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


def use(name: str) -> None:
    """Switch the active backend for this process."""
    global _impl, ACTIVE
    _impl = backend(name)
    ACTIVE = name


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def matmul(a, b):
    return _impl.matmul(_c(a), _c(b))


def bmm(a, b):
    return _impl.bmm(_c(a), _c(b))


def layer_norm_fwd(x, gamma, beta, eps):
    return _impl.layer_norm_fwd(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_bwd(dy, xhat, rstd, gamma):
    return _impl.layer_norm_bwd(_c(dy), _c(xhat), _c(rstd), _c(gamma))


def softmax_fwd(x):
    return _impl.softmax_fwd(_c(x))


def softmax_bwd(y, dy):
    return _impl.softmax_bwd(_c(y), _c(dy))


def gelu_fwd(x):
    return _impl.gelu_fwd(_c(x).reshape(-1)).reshape(x.shape)


def gelu_bwd(x, dy):
    return _impl.gelu_bwd(_c(x).reshape(-1), _c(dy).reshape(-1)).reshape(x.shape)
