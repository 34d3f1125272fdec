"""Named parameter collections with frozen/trainable bookkeeping."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamSet(OrderedDict):
    """Ordered ``name -> Tensor`` map. A tensor is trainable iff ``requires_grad``."""

    def trainable(self) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if v.requires_grad)

    def frozen(self) -> "ParamSet":
        return ParamSet((k, v) for k, v in self.items() if not v.requires_grad)

    def count(self) -> int:
        return sum(t.size for t in self.values())

    def freeze(self, *names: str) -> None:
        for n in names or list(self):
            self[n].requires_grad = False
            self[n].zero_grad()

    def unfreeze(self, *names: str) -> None:
        for n in names or list(self):
            self[n].requires_grad = True

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def fingerprint(self) -> str:
        """SHA-256 over names, shapes, dtypes and raw bytes, in order."""
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(repr((t.shape, t.dtype.str)).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k))
                        for k, v in self.items())

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data, requires_grad=v.requires_grad, name=k)) for k, v in self.items())

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.items():
            yield k, v.data
