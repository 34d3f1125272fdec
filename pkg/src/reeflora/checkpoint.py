"""Checkpoint files.

Layout, all little-endian::

    b"REEFCKPT"                   8-byte magic
    u32 header length
    header JSON (UTF-8, sorted keys)
    tensor blocks, in header order, each in tensor serialization format

The header records configs, iteration, best validation match ratio, the
optimizer step and, per block, the tensor name, its role (``param``,
``adam_m``, ``adam_v``) and whether it is trainable. Saving, loading and
saving again yields identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .lora import LoraConfig
from .model import ReefClassifier
from .optim import OptimizerState
from .params import ParamSet
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes
from .vit import ModelConfig

MAGIC = b"REEFCKPT"
CHECKPOINT_SCHEMA = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    lora_config: LoraConfig
    train_config: dict
    params: ParamSet
    optimizer: OptimizerState | None = None
    iteration: int = 0
    best_val_match_ratio: float | None = None
    extra: dict = field(default_factory=dict)

    def model(self) -> ReefClassifier:
        return ReefClassifier(self.model_config, self.lora_config, self.params)

    def to_bytes(self) -> bytes:
        entries, blocks = [], []
        for name, t in self.params.items():
            entries.append({"name": name, "role": "param", "trainable": t.requires_grad})
            blocks.append(tensor_to_bytes(t))
        opt_step = None
        if self.optimizer is not None:
            opt_step = self.optimizer.step
            for name in self.optimizer.m:
                for role, store in (("adam_m", self.optimizer.m), ("adam_v", self.optimizer.v)):
                    entries.append({"name": name, "role": role, "trainable": True})
                    blocks.append(tensor_to_bytes(store[name]))
        header = {
            "schema_version": CHECKPOINT_SCHEMA,
            "model": self.model_config.to_dict(),
            "lora": self.lora_config.to_dict(),
            "train": self.train_config,
            "iteration": self.iteration,
            "best_val_match_ratio": self.best_val_match_ratio,
            "optimizer_step": opt_step,
            "extra": self.extra,
            "tensors": entries,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blocks)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise DataError(f"{source}: not a checkpoint (bad magic)")
        try:
            (hlen,) = struct.unpack_from("<I", buf, 8)
            header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{source}: corrupt checkpoint header ({exc})") from exc
        if header.get("schema_version") != CHECKPOINT_SCHEMA:
            raise DataError(f"{source}: checkpoint schema {header.get('schema_version')!r} unsupported")
        offset = 12 + hlen
        params = ParamSet()
        m, v = {}, {}
        view = memoryview(buf)
        for entry in header["tensors"]:
            try:
                arr, offset = tensor_from_bytes(view, offset)
            except (struct.error, ValueError, KeyError) as exc:
                raise DataError(f"{source}: truncated tensor block {entry['name']!r}") from exc
            role, name = entry["role"], entry["name"]
            if role == "param":
                params[name] = Tensor(arr, requires_grad=entry["trainable"], name=name)
            elif role == "adam_m":
                m[name] = arr
            elif role == "adam_v":
                v[name] = arr
            else:
                raise DataError(f"{source}: unknown tensor role {role!r}")
        if offset != len(buf):
            raise DataError(f"{source}: {len(buf) - offset} trailing bytes after last tensor block")
        opt = None
        if header["optimizer_step"] is not None:
            opt = OptimizerState(step=header["optimizer_step"], m=m, v=v)
        lora = dict(header["lora"])
        lora["targets"] = tuple(lora["targets"])
        return cls(model_config=ModelConfig.from_dict(header["model"]),
                   lora_config=LoraConfig.from_dict(lora), train_config=header["train"],
                   params=params, optimizer=opt, iteration=header["iteration"],
                   best_val_match_ratio=header["best_val_match_ratio"], extra=header.get("extra", {}))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise DataError(f"{path}: cannot read checkpoint ({exc.strerror or exc})") from exc
        return cls.from_bytes(buf, str(path))


def snapshot(model: ReefClassifier, train_config: dict, optimizer: OptimizerState | None,
             iteration: int, best: float | None) -> Checkpoint:
    """Deep copy of the current model and optimizer state."""
    opt = None
    if optimizer is not None:
        opt = OptimizerState(step=optimizer.step, m={k: a.copy() for k, a in optimizer.m.items()},
                             v={k: a.copy() for k, a in optimizer.v.items()})
    return Checkpoint(model.model_config, model.lora_config, dict(train_config), model.params.copy(),
                      opt, iteration, best)


def frozen_fingerprint(params: ParamSet) -> str:
    return params.frozen().fingerprint()

