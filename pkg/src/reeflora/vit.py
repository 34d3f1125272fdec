"""Vision transformer encoder.

Patchify, linear projection, learnable class token and absolute positional
embeddings, pre-norm transformer blocks, final norm, class-token feature.

Linear weights are stored (out, in). A block projection named ``P`` may carry
``P.lora_A`` / ``P.lora_B`` siblings in the parameter set; the forward pass
then adds the low-rank branch (see :mod:`reeflora.lora`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import rng
from .errors import ConfigError, GeometryError
from .lora import adapted_linear
from .params import ParamSet
from .tensor import (Tensor, add, concat, gelu, getitem, layer_norm, linear, matmul, repeat_leading,
                     reshape, scale, softmax, transpose)

BLOCK_LINEARS = ("attn.query", "attn.key", "attn.value", "attn.output", "mlp.fc1", "mlp.fc2")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 512
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 1536
    depth: int = 40
    heads: int = 24
    mlp_ratio: float = 4.0
    num_classes: int = 8
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "depth", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"model.image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"model.embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_classes < 1:
            raise ConfigError(f"model.num_classes must be >= 1, got {self.num_classes}")
        if self.mlp_ratio <= 0 or self.ln_eps <= 0:
            raise ConfigError("model.mlp_ratio and model.ln_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def linear_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """(d, k) = (out, in) for every block linear, keyed by its name inside a block."""
    D, Hm = config.embed_dim, config.mlp_hidden
    return {"attn.query": (D, D), "attn.key": (D, D), "attn.value": (D, D),
            "attn.output": (D, D), "mlp.fc1": (Hm, D), "mlp.fc2": (D, Hm)}


def backbone_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count of :func:`init_params` output."""
    D = config.embed_dim
    total = config.patch_dim * D + D + D + (1 + config.num_tokens) * D
    per_block = 4 * D  # two layer norms
    for d, k in linear_shapes(config).values():
        per_block += d * k + d
    return total + config.depth * per_block + 2 * D


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (H, W, C) or (B, H, W, C) into patch rows.

    Tokens run row-major over the patch grid; each token flattens its patch in
    (row, col, channel) order. Returns (T, p*p*C) or (B, T, p*p*C).
    """
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise GeometryError(f"patchify expects (H, W, C) or (B, H, W, C), got shape {np.shape(image)}")
    b, h, w, c = img.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise GeometryError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    out = img.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * c)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def init_params(config: ModelConfig, seed: int, dtype=np.float32, trainable: bool = False) -> ParamSet:
    """Fresh backbone parameters.

    Weights and the class token are truncated normal (std 0.02, cut at 2 std),
    biases zero, layer-norm scales one, positional embedding zero. The backbone
    stands in for pretrained weights, so it is frozen unless ``trainable``.
    """
    gen = rng.stream(seed, "backbone")
    D = config.embed_dim
    ps = ParamSet()

    def put(name, arr):
        ps[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=trainable, name=name)

    put("patch_embed.weight", rng.truncated_normal(gen, (D, config.patch_dim)))
    put("patch_embed.bias", np.zeros(D))
    put("cls_token", rng.truncated_normal(gen, (D,)))
    put("pos_embed", np.zeros((1 + config.num_tokens, D)))
    shapes = linear_shapes(config)
    for i in range(config.depth):
        pre = f"blocks.{i}"
        put(f"{pre}.norm1.weight", np.ones(D))
        put(f"{pre}.norm1.bias", np.zeros(D))
        for lin in ("attn.query", "attn.key", "attn.value", "attn.output"):
            d, k = shapes[lin]
            put(f"{pre}.{lin}.weight", rng.truncated_normal(gen, (d, k)))
            put(f"{pre}.{lin}.bias", np.zeros(d))
        put(f"{pre}.norm2.weight", np.ones(D))
        put(f"{pre}.norm2.bias", np.zeros(D))
        for lin in ("mlp.fc1", "mlp.fc2"):
            d, k = shapes[lin]
            put(f"{pre}.{lin}.weight", rng.truncated_normal(gen, (d, k)))
            put(f"{pre}.{lin}.bias", np.zeros(d))
    put("norm.weight", np.ones(D))
    put("norm.bias", np.zeros(D))
    return ps


def _project(params: ParamSet, name: str, x: Tensor, lora_scale: float) -> Tensor:
    a = params.get(f"{name}.lora_A")
    if a is None:
        return linear(x, params[f"{name}.weight"], params[f"{name}.bias"])
    return adapted_linear(x, params[f"{name}.weight"], params[f"{name}.bias"], a,
                          params[f"{name}.lora_B"], lora_scale)


def attention(params: ParamSet, pre: str, x: Tensor, config: ModelConfig, lora_scale: float,
              trace: dict | None = None) -> Tensor:
    b, s, D = x.shape
    h, hd = config.heads, config.head_dim

    def heads_first(t):
        return reshape(transpose(reshape(t, (b, s, h, hd)), (0, 2, 1, 3)), (b * h, s, hd))

    q = heads_first(_project(params, f"{pre}.attn.query", x, lora_scale))
    k = heads_first(_project(params, f"{pre}.attn.key", x, lora_scale))
    v = heads_first(_project(params, f"{pre}.attn.value", x, lora_scale))
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(hd))
    probs = softmax(scores)
    if trace is not None:
        trace.setdefault("attention", []).append(probs.data.reshape(b, h, s, s).copy())
    ctx = reshape(transpose(reshape(matmul(probs, v), (b, h, s, hd)), (0, 2, 1, 3)), (b, s, D))
    return _project(params, f"{pre}.attn.output", ctx, lora_scale)


def block(params: ParamSet, i: int, x: Tensor, config: ModelConfig, lora_scale: float,
          trace: dict | None = None) -> Tensor:
    pre = f"blocks.{i}"
    eps = config.ln_eps
    y = layer_norm(x, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"], eps)
    x = add(x, attention(params, pre, y, config, lora_scale, trace))
    y = layer_norm(x, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"], eps)
    y = gelu(_project(params, f"{pre}.mlp.fc1", y, lora_scale))
    return add(x, _project(params, f"{pre}.mlp.fc2", y, lora_scale))


def check_geometry(config: ModelConfig, images: np.ndarray) -> None:
    shape = np.shape(images)
    want = (config.image_size, config.image_size, config.channels)
    if tuple(shape[-3:]) != want:
        raise GeometryError(f"image shape {tuple(shape[-3:])} does not match model geometry {want}")


def embed(params: ParamSet, config: ModelConfig, images: np.ndarray, lora_scale: float = 1.0) -> Tensor:
    """Patch projection, class token prepended, positional embedding added: (B, 1 + T, D)."""
    check_geometry(config, images)
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    dtype = params["patch_embed.weight"].dtype
    tokens = Tensor(patchify(imgs.astype(dtype, copy=False), config.patch_size))
    x = _project(params, "patch_embed", tokens, lora_scale)
    b = x.shape[0]
    cls = reshape(repeat_leading(params["cls_token"], b), (b, 1, config.embed_dim))
    return add(concat([cls, x], axis=1), params["pos_embed"])


def run_blocks(params: ParamSet, config: ModelConfig, x: Tensor, start: int = 0, stop: int | None = None,
               lora_scale: float = 1.0, trace: dict | None = None) -> Tensor:
    for i in range(start, config.depth if stop is None else stop):
        x = block(params, i, x, config, lora_scale, trace)
    return x


def encode_tokens(params: ParamSet, config: ModelConfig, images: np.ndarray, lora_scale: float = 1.0,
                  trace: dict | None = None) -> Tensor:
    """Token states after the last block, before the final norm: (B, 1 + T, D)."""
    return run_blocks(params, config, embed(params, config, images, lora_scale), lora_scale=lora_scale,
                      trace=trace)


def features_from_tokens(params: ParamSet, config: ModelConfig, tokens: Tensor) -> Tensor:
    x = layer_norm(tokens, params["norm.weight"], params["norm.bias"], config.ln_eps)
    return getitem(x, (slice(None), 0, slice(None)))


def forward(params: ParamSet, config: ModelConfig, image: np.ndarray, lora_scale: float = 1.0,
            trace: dict | None = None) -> Tensor:
    """Class-token feature: (D,) for one (H, W, C) image, (B, D) for a batch."""
    feats = features_from_tokens(params, config, encode_tokens(params, config, image, lora_scale, trace))
    return getitem(feats, 0) if np.ndim(image) == 3 else feats
