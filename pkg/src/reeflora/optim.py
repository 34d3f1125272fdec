"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .params import ParamSet


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet) -> "OptimizerState":
        trainable = params.trainable()
        return cls(step=0,
                   m={k: np.zeros_like(t.data) for k, t in trainable.items()},
                   v={k: np.zeros_like(t.data) for k, t in trainable.items()})


def adamw_step(params: ParamSet, grads: dict[str, np.ndarray] | None, state: OptimizerState, *,
               lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> OptimizerState:
    """One in-place AdamW update of every trainable tensor in ``params``.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta,
    both terms evaluated at the old theta. Frozen tensors are not touched.
    ``grads`` defaults to each tensor's ``.grad``.
    """
    trainable = params.trainable()
    if set(trainable) != set(state.m) or set(state.m) != set(state.v):
        raise ContractError(f"optimizer state covers {sorted(state.m)} but trainable set is {sorted(trainable)}")
    if grads is None:
        grads = {k: t.grad for k, t in trainable.items()}
    extra = set(grads) - set(trainable)
    if extra:
        raise ContractError(f"gradients supplied for frozen or unknown tensors: {sorted(extra)}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in trainable.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for trainable tensor {name}")
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or v.shape != p.shape or np.shape(g) != p.shape:
            raise ContractError(f"{name}: param {p.shape}, grad {np.shape(g)}, state {m.shape}/{v.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta = p.data
        p.data = (theta - lr * m_hat / (np.sqrt(v_hat) + eps) - (lr * weight_decay) * theta).astype(theta.dtype, copy=False)
    state.step = t
    return state
