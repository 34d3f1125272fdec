"""Gradient-weighted class activation maps over patch tokens.

For a chosen block (default: the last), take the patch-token activations A
(T x D, class token excluded) at that block's output and the gradient of one
class logit with respect to them. Channel weights are the token-mean of the
gradient; the map is ReLU(A @ w), reshaped to the patch grid, divided by its
max when the max is positive, and bilinearly upsampled to the tile size.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError
from .head import CLASS_NAMES, head_logits
from .model import ReefClassifier
from .tensor import Tensor, getitem, no_grad
from .vit import embed, features_from_tokens, run_blocks


@dataclass
class Heatmap:
    grid: np.ndarray         # (H/p, W/p), values in [0, 1]
    upsampled: np.ndarray    # (H, W), values in [0, 1]
    class_index: int
    layer: int
    tile: str | None = None

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_index] if self.class_index < len(CLASS_NAMES) else str(self.class_index)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.upsampled * 255.0), 0, 255).astype(np.uint8)

    def sidecar(self) -> dict:
        return {"class_index": self.class_index, "class_name": self.class_name, "layer": self.layer,
                "tile": self.tile, "grid_shape": list(self.grid.shape), "grid": self.grid.tolist()}

    def save(self, png_path: str | os.PathLike) -> tuple[Path, Path]:
        """Write an 8-bit grayscale PNG (or PGM, by suffix) plus a ``.json`` sidecar."""
        png_path = Path(png_path)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(self.to_uint8(), mode="L").save(png_path)
        side = png_path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(), indent=2), encoding="utf-8")
        return png_path, side


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping (a convex combination)."""
    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1.0 - frac
        m[np.arange(n_out), hi] += frac
        return m

    g = np.asarray(grid, dtype=np.float64)
    out = axis_weights(g.shape[0], out_h) @ g @ axis_weights(g.shape[1], out_w).T
    return np.clip(out, 0.0, 1.0)


def grad_cam(model: ReefClassifier, tile: np.ndarray, class_index: int, layer: int | None = None,
             tile_ref: str | None = None) -> Heatmap:
    cfg = model.model_config
    if not 0 <= int(class_index) < cfg.num_classes:
        raise ContractError(f"class index {class_index} outside [0, {cfg.num_classes})")
    layer = cfg.depth - 1 if layer is None else int(layer)
    if not 0 <= layer < cfg.depth:
        raise ContractError(f"layer {layer} outside [0, {cfg.depth})")
    img = np.asarray(tile)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255.0)
    img = img.astype(model.dtype, copy=False)

    params, scale = model.params, model.lora_scale
    with no_grad():
        acts = run_blocks(params, cfg, embed(params, cfg, img, scale), 0, layer + 1, scale)
    a = Tensor(acts.data, requires_grad=True)
    rest = run_blocks(params, cfg, a, layer + 1, None, scale)
    logit = getitem(head_logits(params, features_from_tokens(params, cfg, rest)), (0, int(class_index)))
    logit.backward()
    grad = a.grad[0, 1:].astype(np.float64)
    params.zero_grad()  # leave the model as we found it

    act = acts.data[0, 1:].astype(np.float64)          # (T, D)
    weights = grad.mean(axis=0)
    cam = np.maximum(act @ weights, 0.0).reshape(cfg.grid, cfg.grid)
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(grid=cam, upsampled=bilinear_upsample(cam, cfg.image_size, cfg.image_size),
                   class_index=int(class_index), layer=layer, tile=tile_ref)
