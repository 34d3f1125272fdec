"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Same signatures and semantics. Matmul goes through numpy (and so BLAS);
everything else is vectorized numpy.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def bmm(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shapes differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(dy, xhat, rstd, gamma):
    g = dy * gamma
    m1 = g.mean(axis=1, keepdims=True)
    m2 = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x ** 3)))


def gelu_bwd(x, dy):
    t = np.tanh(GELU_C * (x + GELU_K * x ** 3))
    du = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
