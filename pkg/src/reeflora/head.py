"""Multi-label classification head, sigmoid probabilities and BCE objective."""
from __future__ import annotations

import numpy as np

from . import rng
from .errors import ContractError
from .params import ParamSet
from .tensor import Tensor, linear

CLASS_NAMES = ("HLC", "CPC", "DDC", "RBL", "CPT", "DSE", "PRD", "PHY")
CLASS_TITLES = {
    "HLC": "Healthy coral", "CPC": "Compromised coral", "DDC": "Dead coral", "RBL": "Rubble",
    "CPT": "Competition", "DSE": "Disease", "PRD": "Predation", "PHY": "Physical issues",
}
BCE_EPS = 1e-7
DEFAULT_THRESHOLD = 0.5


def class_index(name: str) -> int:
    """Index of a class abbreviation (case-insensitive) or a plain integer string."""
    key = str(name).strip().upper()
    if key in CLASS_NAMES:
        return CLASS_NAMES.index(key)
    if key.isdigit() and int(key) < len(CLASS_NAMES):
        return int(key)
    raise ContractError(f"unknown class {name!r}; expected one of {', '.join(CLASS_NAMES)}")


def init_head(embed_dim: int, num_classes: int, seed: int, dtype=np.float32) -> ParamSet:
    gen = rng.stream(seed, "head")
    w = rng.truncated_normal(gen, (num_classes, embed_dim)).astype(dtype)
    return ParamSet([
        ("head.weight", Tensor(w, requires_grad=True, name="head.weight")),
        ("head.bias", Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.bias")),
    ])


def head_logits(params: ParamSet, features: Tensor) -> Tensor:
    return linear(features, params["head.weight"], params["head.bias"])


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(probs, labels, eps: float = BCE_EPS) -> float:
    """-(1/N) sum_i sum_j [y log p + (1 - y) log(1 - p)], p clamped to [eps, 1 - eps].

    Averaged over samples and summed over classes.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if p.shape != y.shape:
        raise ContractError(f"bce_loss: probabilities {p.shape} and labels {y.shape} differ")
    if p.shape[0] < 1:
        raise ContractError("bce_loss: empty batch")
    p = np.clip(p, eps, 1.0 - eps)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / p.shape[0])


def predict_labels(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where prob >= threshold. Ties go positive."""
    return (np.asarray(probs) >= threshold).astype(np.int8)
