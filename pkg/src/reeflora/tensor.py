"""Dense tensors with tape-based reverse-mode differentiation.

Row-major numpy storage, float32 or float64. Binary ops require equal shapes,
except that ``add`` also accepts a right operand whose shape equals the
trailing axes of the left one (bias-add over the leading axes). There is no
other broadcasting.

Gradients accumulate: calling :meth:`Tensor.backward` twice without
:meth:`Tensor.zero_grad` adds the second result onto the first. Only leaf
tensors (created by the user with ``requires_grad=True``) keep ``.grad``.
"""
from __future__ import annotations

import contextlib
import enum
import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, ShapeError

GELU_CONSTANT = 0.044715


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)

    @classmethod
    def of(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            try:
                return cls(value.lower())
            except ValueError:
                raise ConfigError(f"precision must be f32 or f64, got {value!r}") from None
        dt = np.dtype(value)
        if dt not in (np.float32, np.float64):
            raise ConfigError(f"precision must be f32 or f64, got dtype {dt.name}")
        return cls.F32 if dt == np.float32 else cls.F64


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype) if np.isscalar(value) else value, dtype=like.dtype)


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


# -- elementwise --------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "add")
    if a.shape == b.shape:
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))
    nb = len(b.shape)
    if nb < len(a.shape) and a.shape[len(a.shape) - nb:] == b.shape:
        lead = tuple(range(len(a.shape) - nb))
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not equal or bias-compatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c_ = a.dtype.type(c)
    return Tensor._result(a.data * c_, (a,), lambda g: (g * c_,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    return Tensor._result(kernels.gelu_fwd(x), (a,), lambda g: (kernels.gelu_bwd(x, g),))


# -- reductions ----------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return Tensor._result(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    shape, dt = a.shape, a.dtype
    return Tensor._result(np.asarray(a.data.mean(), dtype=dt), (a,),
                          lambda g: (np.full(shape, g / n, dtype=dt),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


# -- shape ops -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return Tensor._result(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dt = a.shape, a.dtype
    out = np.array(a.data[idx], copy=True)  # ascontiguousarray would turn 0-d into (1,)

    def back(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] += g
        return (full,)

    return Tensor._result(out, (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    for p in parts[1:]:
        _same_dtype(parts[0], p, "concat")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor._result(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def repeat_leading(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.shape))
    return Tensor._result(out, (a,), lambda g: (g.sum(axis=0),))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted forms: (m, k) @ (k, n); (..., k) @ (k, n) with leading axes
    flattened; (s, m, k) @ (s, k, n) batched.
    """
    _same_dtype(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if bd.ndim == 2:
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = kernels.matmul(a2, bd).reshape(lead + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = kernels.matmul(g2, np.ascontiguousarray(bd.T)).reshape(ad.shape)
            gb = kernels.matmul(np.ascontiguousarray(a2.T), g2)
            return ga, gb

        return Tensor._result(out, (a, b), back)
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0]:
        out = kernels.bmm(ad, bd)

        def back3(g):
            ga = kernels.bmm(g, np.ascontiguousarray(bd.transpose(0, 2, 1)))
            gb = kernels.bmm(np.ascontiguousarray(ad.transpose(0, 2, 1)), g)
            return ga, gb

        return Tensor._result(out, (a, b), back3)
    raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# -- normalization and attention pieces ---------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shape = a.shape
    y = kernels.softmax_fwd(a.data.reshape(-1, shape[-1]))
    return Tensor._result(y.reshape(shape), (a,),
                          lambda g: (kernels.softmax_bwd(y, g.reshape(y.shape)).reshape(shape),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def back(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return Tensor._result(y.reshape(shape), (x, gamma, beta), back)


def bce_with_logits(logits: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy summed over classes, averaged over samples.

    Probabilities are clamped to [eps, 1 - eps]; both logs are evaluated in
    log-sigmoid form so large logits never produce inf. The gradient passed
    back is (sigmoid(z) - y) / N everywhere, including inside the clamp.
    """
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    if z.ndim != 2 or y.shape != z.shape:
        raise ContractError(f"bce: logits {z.shape} and labels {y.shape} must be equal (N, C)")
    n = z.shape[0]
    lo, hi = np.log(eps), np.log1p(-eps)
    with np.errstate(invalid="ignore"):  # non-finite logits propagate; the trainer reports them
        log_p = np.clip(-np.logaddexp(0.0, -z), lo, hi)
        log_q = np.clip(-np.logaddexp(0.0, z), lo, hi)
        loss = -(y * log_p + (1.0 - y) * log_q).sum() / n
        prob = np.exp(-np.logaddexp(0.0, -z))
    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,),
                          lambda g: (g * (prob - y) / n,))


# -- serialization -------------------------------------------------------------

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Header (u32 length + JSON: shape, dtype, byte order) then raw little-endian payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    tag = Precision.of(arr.dtype).value
    header = json.dumps({"byte_order": "little", "dtype": tag, "shape": list(arr.shape)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    return struct.pack("<I", len(header)) + header + payload


def tensor_from_bytes(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`tensor_to_bytes`; returns (array, offset past the block)."""
    (hlen,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    header = json.loads(bytes(buf[offset:offset + hlen]).decode("utf-8"))
    offset += hlen
    if header.get("byte_order") != "little":
        raise ContractError(f"unsupported byte order {header.get('byte_order')!r}")
    dt = _DTYPE_TAGS[header["dtype"]]
    shape = tuple(header["shape"])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), offset + count * dt.itemsize


def parameters_requiring_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
