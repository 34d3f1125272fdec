"""The assembled classifier: frozen backbone, optional adapters, trainable head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .head import head_logits, init_head, predict_labels, sigmoid
from .lora import LoraConfig, init_lora
from .params import ParamSet
from .tensor import Tensor, no_grad
from .vit import ModelConfig, encode_tokens, features_from_tokens, init_params


def apply_lora(params: ParamSet, model_config: ModelConfig, lora_config: LoraConfig, seed: int) -> ParamSet:
    """Return a new ParamSet with adapters inserted after each targeted layer.

    Rank 0 leaves every layer unwrapped.
    """
    if lora_config.rank == 0:
        return ParamSet(params)
    gen = rng.stream(seed, "lora")
    wanted = {f"blocks.{i}.{n}" for i in range(model_config.depth) for n in lora_config.layer_names()}
    out = ParamSet()
    for name, t in params.items():
        out[name] = t
        if name.endswith(".bias") and name[:-5] in wanted:
            layer = name[:-5]
            wrapped = init_lora(params[f"{layer}.weight"], lora_config, gen)
            out[f"{layer}.lora_A"] = wrapped.A
            out[f"{layer}.lora_B"] = wrapped.B
            wrapped.A.name, wrapped.B.name = f"{layer}.lora_A", f"{layer}.lora_B"
    return out


@dataclass
class ReefClassifier:
    model_config: ModelConfig
    lora_config: LoraConfig
    params: ParamSet

    @property
    def lora_scale(self) -> float:
        return self.lora_config.scale

    @property
    def dtype(self) -> np.dtype:
        return self.params["head.weight"].dtype

    def tokens(self, images) -> Tensor:
        return encode_tokens(self.params, self.model_config, images, self.lora_scale)

    def logits(self, images) -> Tensor:
        feats = features_from_tokens(self.params, self.model_config, self.tokens(_batch(images)))
        return head_logits(self.params, feats)

    def probabilities(self, images) -> np.ndarray:
        with no_grad():
            return sigmoid(self.logits(images).data)

    def predict(self, images, threshold: float = 0.5) -> np.ndarray:
        return predict_labels(self.probabilities(images), threshold)

    def trainable(self) -> ParamSet:
        return self.params.trainable()

    def frozen(self) -> ParamSet:
        return self.params.frozen()

    def without_adapters(self) -> "ReefClassifier":
        base = ParamSet((k, v) for k, v in self.params.items() if ".lora_" not in k)
        return ReefClassifier(self.model_config, LoraConfig(rank=0, targets=self.lora_config.targets), base)


def _batch(images) -> np.ndarray:
    arr = np.asarray(images)
    return arr[None] if arr.ndim == 3 else arr


def build_model(model_config: ModelConfig, lora_config: LoraConfig, seed: int, dtype=np.float32) -> ReefClassifier:
    """Backbone (frozen) + adapters (trainable) + head (trainable), all from one seed."""
    backbone = init_params(model_config, seed, dtype=dtype, trainable=False)
    params = apply_lora(backbone, model_config, lora_config, seed)
    params.update(init_head(model_config.embed_dim, model_config.num_classes, seed, dtype))
    return ReefClassifier(model_config, lora_config, params)
