"""Low-rank adapters on frozen linear layers.

A wrapped layer computes ``h = W0 x + (alpha / r) * B (A x) + bias`` with
``W0`` (d x k) frozen, ``A`` (r x k) Gaussian-initialized and ``B`` (d x r)
zero-initialized, so a fresh adapter leaves the layer's output unchanged.
Training ``A`` and ``B`` touches ``d*r + r*k`` numbers instead of ``d*k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import rng
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, add, getitem, linear, reshape, scale

if TYPE_CHECKING:
    from .vit import ModelConfig

TARGET_LAYERS = {
    "query": ("attn.query",),
    "key": ("attn.key",),
    "value": ("attn.value",),
    "output": ("attn.output",),
    "mlp": ("mlp.fc1", "mlp.fc2"),
}
A_INIT_STD = 0.02


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 24
    alpha: float | None = None  # None means alpha = rank
    targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.rank < 0:
            raise ConfigError(f"lora.rank must be >= 0, got {self.rank}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError(f"lora.alpha must be positive, got {self.alpha}")
        bad = [t for t in self.targets if t not in TARGET_LAYERS]
        if bad:
            raise ConfigError(f"lora.targets: unknown {bad}; choose from {sorted(TARGET_LAYERS)}")
        if len(set(self.targets)) != len(self.targets):
            raise ConfigError(f"lora.targets has duplicates: {list(self.targets)}")

    @property
    def effective_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)

    @property
    def scale(self) -> float:
        return self.effective_alpha / self.rank if self.rank else 0.0

    def layer_names(self) -> list[str]:
        return [name for t in self.targets for name in TARGET_LAYERS[t]]

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        unknown = set(d) - {"rank", "alpha", "targets"}
        if unknown:
            raise ConfigError(f"unknown lora keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LoraLinear:
    weight: Tensor           # W0, (d, k), frozen
    A: Tensor                # (r, k)
    B: Tensor                # (d, r)
    alpha: float
    bias: Tensor | None = None

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def init_lora(weight: Tensor | np.ndarray, config: LoraConfig, seed, bias=None) -> LoraLinear:
    """Wrap a (d, k) weight. ``seed`` is an int or a numpy Generator."""
    w0 = weight if isinstance(weight, Tensor) else Tensor(weight)
    w0.requires_grad = False
    if w0.data.ndim != 2:
        raise ShapeError(f"init_lora: weight must be 2-D, got {w0.shape}")
    d, k = w0.shape
    r = config.rank
    if r < 1:
        raise ContractError("init_lora needs rank >= 1; rank 0 means the layer is left unwrapped")
    if r >= min(d, k):
        raise ConfigError(f"lora.rank {r} must be < min(d, k) = {min(d, k)} for a {d}x{k} weight")
    gen = seed if isinstance(seed, np.random.Generator) else rng.stream(seed, "lora")
    dt = w0.dtype
    a = Tensor(gen.normal(0.0, A_INIT_STD, size=(r, k)).astype(dt), requires_grad=True)
    b = Tensor(np.zeros((d, r), dtype=dt), requires_grad=True)
    if bias is not None and not isinstance(bias, Tensor):
        bias = Tensor(np.asarray(bias, dtype=dt))
    if bias is not None:
        bias.requires_grad = False
    return LoraLinear(weight=w0, A=a, B=b, alpha=config.effective_alpha, bias=bias)


def adapted_linear(x: Tensor, weight: Tensor, bias: Tensor | None, a: Tensor, b: Tensor,
                   lora_scale: float) -> Tensor:
    """``x W0^T + bias + lora_scale * (x A^T) B^T`` over the leading axes of ``x``."""
    base = linear(x, weight, bias)
    return add(base, scale(linear(linear(x, a), b), lora_scale))


def lora_forward(layer: LoraLinear, x) -> Tensor:
    """Apply the wrapped layer to a length-k vector or a (..., k) batch."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=layer.weight.dtype))
    k = layer.weight.shape[1]
    if x.shape[-1] != k:
        raise ShapeError(f"lora_forward: input {x.shape} does not match weight {layer.weight.shape}")
    if x.data.ndim == 1:
        return getitem(adapted_linear(reshape(x, (1, k)), layer.weight, layer.bias,
                                      layer.A, layer.B, layer.scale), 0)
    return adapted_linear(x, layer.weight, layer.bias, layer.A, layer.B, layer.scale)


def merge_weights(layer: LoraLinear) -> np.ndarray:
    """Effective weight ``W0 + (alpha / r) B A``; exactly ``W0`` when B is zero."""
    w0 = layer.weight.data
    if not layer.B.data.any():
        return w0.copy()
    return w0 + layer.scale * (layer.B.data @ layer.A.data)


@dataclass
class ParamBudget:
    trainable: int
    frozen: int
    layers: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    def to_dict(self) -> dict:
        return {"trainable": self.trainable, "frozen": self.frozen, "total": self.total,
                "layers": self.layers}


def head_param_count(model_config: "ModelConfig") -> int:
    return model_config.embed_dim * model_config.num_classes + model_config.num_classes


def count_trainable(model_config: "ModelConfig", lora_config: LoraConfig) -> ParamBudget:
    """Trainable = adapters on every wrapped layer plus the classifier head.

    Each wrapped d x k weight contributes ``d*r + r*k``. The backbone is frozen
    in full; adapters add parameters rather than replacing any.
    """
    from .vit import backbone_param_count, linear_shapes

    r = lora_config.rank
    shapes = linear_shapes(model_config)
    layers = []
    adapters = 0
    if r > 0:
        for i in range(model_config.depth):
            for name in lora_config.layer_names():
                d, k = shapes[name]
                if r >= min(d, k):
                    raise ConfigError(f"lora.rank {r} must be < min(d, k) = {min(d, k)} for blocks.{i}.{name}")
                n = d * r + r * k
                adapters += n
                layers.append({"name": f"blocks.{i}.{name}", "d": d, "k": k, "full": d * k, "adapter": n})
    head = head_param_count(model_config)
    layers.append({"name": "head", "d": model_config.num_classes, "k": model_config.embed_dim,
                   "full": head, "adapter": head})
    return ParamBudget(trainable=adapters + head, frozen=backbone_param_count(model_config), layers=layers)
