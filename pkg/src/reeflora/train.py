"""Training loop, evaluation and the rank sweep."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .checkpoint import Checkpoint, snapshot
from .data import Manifest, load_tiles, raster_size
from .errors import ConfigError, ContractError, GeometryError, ReefError, TrainingError
from .head import DEFAULT_THRESHOLD, predict_labels, sigmoid
from .lora import LoraConfig, count_trainable
from .metrics import MetricsReport, evaluate_predictions
from .model import ReefClassifier, build_model
from .optim import OptimizerState, adamw_step
from .tensor import Precision, bce_with_logits, no_grad
from .vit import ModelConfig, check_geometry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-6
    weight_decay: float = 5e-4
    batch_size: int = 16
    max_iterations: int = 30_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    eval_interval: int = 1000
    checkpoint_interval: int = 0  # 0: only at the end
    threshold: float = DEFAULT_THRESHOLD
    precision: str = "f32"
    strict: bool = True  # False: skip unreadable tiles with a warning

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0 or self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ConfigError("train.max_iterations / eval_interval / checkpoint_interval must be >= 0")
        if self.weight_decay < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps_adam <= 0:
            raise ConfigError("train: weight_decay >= 0, betas in [0, 1), eps_adam > 0 required")
        Precision.of(self.precision)

    @property
    def dtype(self) -> np.dtype:
        return Precision.of(self.precision).dtype

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    latest: Checkpoint
    best: Checkpoint | None
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


def _batches(n: int, batch_size: int, gen: np.random.Generator):
    """Endless stream of index batches; a fresh permutation each epoch."""
    queue: list[int] = []
    while True:
        while len(queue) < batch_size:
            queue.extend(gen.permutation(n).tolist())
        batch, queue = queue[:batch_size], queue[batch_size:]
        yield np.asarray(batch)


def predict_arrays(model: ReefClassifier, images: np.ndarray, threshold: float,
                   batch_size: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(predict_labels(sigmoid(model.logits(images[i:i + batch_size]).data), threshold))
    return np.concatenate(out)


def train(model_config: ModelConfig, lora_config: LoraConfig, train_config: TrainConfig,
          train_manifest: Manifest, val_manifest: Manifest, out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Iteration-based AdamW training of adapters and head.

    Evaluates on ``val_manifest`` every ``eval_interval`` iterations and at the
    end, keeping the best checkpoint by validation match ratio. With ``out_dir``
    writes ``latest.ckpt``, ``best.ckpt`` and ``log.jsonl`` there.
    """
    if not len(train_manifest) or not len(val_manifest):
        raise ContractError("train and validation manifests must be non-empty")
    cfg = train_config
    x_train, y_train, _ = load_tiles(train_manifest, strict=cfg.strict)
    x_val, y_val, _ = load_tiles(val_manifest, strict=cfg.strict)
    check_geometry(model_config, x_train)
    check_geometry(model_config, x_val)
    if y_train.shape[1] != model_config.num_classes:
        raise ConfigError(f"manifest has {y_train.shape[1]} classes, model.num_classes is {model_config.num_classes}")
    x_train, x_val = x_train.astype(cfg.dtype), x_val.astype(cfg.dtype)

    model = build_model(model_config, lora_config, cfg.seed, dtype=cfg.dtype)
    state = OptimizerState.for_params(model.params)
    batches = _batches(len(x_train), cfg.batch_size, rng.stream(cfg.seed, "shuffle"))
    cfg_dict = cfg.to_dict()
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "w", encoding="utf-8")

    history, evals = [], []
    best: Checkpoint | None = None
    best_ratio: float | None = None
    trainable = model.trainable()
    try:
        for it in range(1, cfg.max_iterations + 1):
            idx = next(batches)
            trainable.zero_grad()
            loss = bce_with_logits(model.logits(x_train[idx]), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at iteration {it} "
                                    f"(lr={cfg.learning_rate}, batch={idx.tolist()})")
            loss.backward()
            adamw_step(model.params, None, state, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                       beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_adam)
            entry = {"iter": it, "loss": value, "lr": cfg.learning_rate}
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")

            if (cfg.eval_interval and it % cfg.eval_interval == 0) or it == cfg.max_iterations:
                report = evaluate_predictions(predict_arrays(model, x_val, cfg.threshold), y_val,
                                              val_manifest.class_names)
                evals.append({"iter": it, "match_ratio": report.match_ratio, "micro_f1": report.micro_f1,
                              "macro_f1": report.macro_f1})
                log.info("iter %d loss %.6f val match %.4f", it, value, report.match_ratio)
                if best_ratio is None or report.match_ratio > best_ratio:
                    best_ratio = report.match_ratio
                    best = snapshot(model, cfg_dict, state, it, best_ratio)
                    if out is not None:
                        best.save(out / "best.ckpt")
            if out is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                snapshot(model, cfg_dict, state, it, best_ratio).save(out / "latest.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()

    latest = snapshot(model, cfg_dict, state, cfg.max_iterations, best_ratio)
    if out is not None:
        latest.save(out / "latest.ckpt")
    return TrainResult(latest=latest, best=best, log=history, evals=evals)


def check_manifest_geometry(model_config: ModelConfig, manifest: Manifest) -> None:
    """Raise before inference if any tile does not match the model's input size."""
    want = (model_config.image_size, model_config.image_size)
    for rec in manifest.records:
        size = raster_size(manifest.resolve(rec))
        if size != want:
            raise GeometryError(f"{manifest.resolve(rec)}: tile is {size[0]}x{size[1]}, "
                                f"model expects {want[0]}x{want[1]}")


def evaluate(checkpoint: Checkpoint, manifest: Manifest, threshold: float = DEFAULT_THRESHOLD,
             batch_size: int = 32) -> MetricsReport:
    if not len(manifest):
        raise ContractError("cannot evaluate an empty manifest")
    check_manifest_geometry(checkpoint.model_config, manifest)
    x, y, _ = load_tiles(manifest, strict=True)
    model = checkpoint.model()
    preds = predict_arrays(model, x.astype(model.dtype), threshold, batch_size)
    return evaluate_predictions(preds, y, manifest.class_names)


# -- rank sweep ------------------------------------------------------------------

SWEEP_COLUMNS = ("rank", "trainable_params", "val_match_ratio", "test_match_ratio", "status", "error")


@dataclass
class SweepTable:
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"columns": list(SWEEP_COLUMNS), "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in SWEEP_COLUMNS})
        return buf.getvalue()


def rank_sweep(model_config: ModelConfig, lora_config: LoraConfig, train_config: TrainConfig,
               ranks: Sequence[int], train_manifest: Manifest, val_manifest: Manifest,
               test_manifest: Manifest, out_dir: str | os.PathLike | None = None) -> SweepTable:
    """One independent run per rank, same seed; rank 0 trains the head only.

    A run that fails records ``status: failed`` and its error; the sweep goes on.
    """
    ranks = [int(r) for r in ranks]
    if len(set(ranks)) != len(ranks):
        raise ContractError(f"ranks must be distinct, got {ranks}")
    if any(r < 0 for r in ranks):
        raise ContractError(f"ranks must be non-negative, got {ranks}")
    rows = []
    for r in sorted(ranks):
        row = {"rank": r, "trainable_params": None, "val_match_ratio": None, "test_match_ratio": None,
               "status": "ok", "error": None}
        try:
            lc = replace(lora_config, rank=r)
            row["trainable_params"] = count_trainable(model_config, lc).trainable
            run_dir = Path(out_dir) / f"rank_{r}" if out_dir is not None else None
            result = train(model_config, lc, train_config, train_manifest, val_manifest, run_dir)
            chosen = result.best or result.latest
            row["val_match_ratio"] = chosen.best_val_match_ratio
            row["test_match_ratio"] = evaluate(chosen, test_manifest, train_config.threshold).match_ratio
        except (ReefError, ValueError, ArithmeticError) as exc:
            log.warning("rank %d failed: %s", r, exc)
            row["status"] = "failed"
            row["error"] = str(exc)
        rows.append(row)
    return SweepTable(rows)
