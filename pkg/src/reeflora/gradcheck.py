"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    n_checked: int
    per_param: list[float] = field(default_factory=list)
    worst: tuple[int, int] | None = None  # (param index, flat element index)


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    fn().backward()
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    for p in params:
        p.zero_grad()
    return grads


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-6, analytic: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and closes over ``params``; the check perturbs
    ``params[i].data`` in place and restores it. Pass ``analytic`` to check a
    supplied gradient instead of calling ``backward``. Never raises on a
    mismatch; the verdict is ``report.passed``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"gradient checking runs in f64; got {p.dtype.name} for {p!r}")
    grads = list(analytic) if analytic is not None else analytic_gradients(fn, params)
    worst_err, worst_at, per_param, n = 0.0, None, [], 0
    for pi, (p, g) in enumerate(zip(params, grads)):
        num = numeric_gradient(fn, p, h)
        err = relative_error(g, num).reshape(-1)
        n += err.size
        m = float(err.max()) if err.size else 0.0
        per_param.append(m)
        if m > worst_err or worst_at is None:
            worst_err, worst_at = m, (pi, int(err.argmax()) if err.size else 0)
    return GradCheckReport(max_rel_error=worst_err, passed=bool(worst_err <= tol), tolerance=tol,
                           n_checked=n, per_param=per_param, worst=worst_at)
