"""SGD training harness with schedules, NaN detection and JSON-lines metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Batcher, Dataset, batches
from .layers import Scope, softmax_cross_entropy
from .model_zoo import ModelSpec, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    epochs: int = 5
    batch_size: int = 64
    schedule: str = "cosine"  # "step" or "cosine"
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("weight_decay, epochs and batch_size must be non-negative/positive")
        if self.schedule not in ("step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        object.__setattr__(self, "milestones", ms)


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class MetricsRecord:
    epochs: list[dict] = field(default_factory=list)
    test_acc: float | None = None
    nan_onset_epoch: int | None = None

    def final_line(self) -> dict:
        out = {"final": True, "test_acc": self.test_acc}
        if self.nan_onset_epoch is not None:
            out["nan_onset_epoch"] = self.nan_onset_epoch
        return out

    def lines(self, final: bool = True) -> list[str]:
        rows = self.epochs + ([self.final_line()] if final else [])
        return [json.dumps(_finite_or_none(r), sort_keys=True) for r in rows]

    def write(self, path, final: bool = True) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("".join(line + "\n" for line in self.lines(final)))
        tmp.replace(path)


def _finite_or_none(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}


@dataclass
class TrainResult:
    metrics: MetricsRecord
    params: dict
    buffers: dict


# optimizer --------------------------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to every parameter except the generator's fc2 biases."""
    param = name.rsplit("/", 1)[-1]
    return not (param.startswith("fc2") and param.endswith(".bias"))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
             weight_decay: float) -> tuple[dict, dict]:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``.

    Returns new dicts; running statistics are never passed here.
    """
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if g.shape != p.shape or (v is not None and v.shape != p.shape):
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        step = g + weight_decay * p if weight_decay and decays(name) else g
        v = step if v is None else momentum * v + step
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


def init_velocity(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "step":
        passed = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.lr * cfg.factor ** passed
    return cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0


# training ---------------------------------------------------------------------

def check_compatible(spec: ModelSpec, ds: Dataset) -> None:
    if tuple(ds.images.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"dataset images {ds.images.shape[1:]} do not match model input {spec.input_shape}")
    if ds.classes != spec.classes:
        raise ValueError(f"dataset has {ds.classes} classes, model predicts {spec.classes}")


def loss_and_grads(spec: ModelSpec, params: dict, buffers: dict, images, labels):
    """One train-mode forward/backward; updates ``buffers`` in place."""
    tape = ad.Tape()
    scope = Scope(params, buffers, tape)
    logits = forward(spec, scope, tape.const(images), "train")
    loss = softmax_cross_entropy(logits, labels)
    tape.backward(loss)
    grads = {k: (scope.leaves[k].grad if k in scope.leaves and scope.leaves[k].grad is not None
                 else np.zeros_like(v)) for k, v in params.items()}
    return float(loss.value), logits.value, grads


def _all_finite(*dicts) -> bool:
    return all(np.isfinite(v).all() for d in dicts for v in d.values())


def train(spec: ModelSpec, data: Splits, cfg: TrainConfig, metrics_path=None,
          params: dict | None = None, buffers: dict | None = None) -> TrainResult:
    """Train ``spec`` on ``data.train``; validate each epoch in eval mode.

    On the first non-finite loss, gradient, parameter or running statistic the
    run halts, records the onset epoch and returns normally.
    """
    for ds in (data.train, data.val, data.test):
        check_compatible(spec, ds)
    if params is None:
        params, buffers = init_params(spec, cfg.seed)
    buffers = dict(buffers or {})
    velocity = init_velocity(params)
    record = MetricsRecord()
    batcher = Batcher(cfg.batch_size, seed=cfg.seed, augment=cfg.augment)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        total_loss, correct, seen, steps = 0.0, 0, 0, 0
        for images, labels in batches(data.train, batcher, epoch):
            loss, logits, grads = loss_and_grads(spec, params, buffers, images, labels)
            steps += 1
            total_loss += loss
            correct += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)
            if not (math.isfinite(loss) and _all_finite(grads, buffers)):
                record.nan_onset_epoch = epoch
                break
            params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            if not _all_finite(params):
                record.nan_onset_epoch = epoch
                break
        row = {"epoch": epoch, "lr": lr, "train_loss": total_loss / max(steps, 1),
               "train_acc": 100.0 * correct / max(seen, 1)}
        if record.nan_onset_epoch is not None:
            row["val_acc"] = None
            record.epochs.append(row)
            log.warning("non-finite values at epoch %d; halting", epoch)
            break
        row["val_acc"] = evaluate(spec, params, buffers, data.val, cfg.batch_size)
        record.epochs.append(row)
        log.info("epoch %d lr %.4g loss %.4f train %.2f val %.2f", epoch, lr, row["train_loss"],
                 row["train_acc"], row["val_acc"])
        if metrics_path is not None:
            record.write(metrics_path, final=False)

    if record.nan_onset_epoch is None:
        record.test_acc = evaluate(spec, params, buffers, data.test, cfg.batch_size)
    if metrics_path is not None:
        record.write(metrics_path)
    return TrainResult(record, params, buffers)


# evaluation -------------------------------------------------------------------

def predict(spec: ModelSpec, params: dict, buffers: dict, images: np.ndarray, batch_size: int,
            taps: dict | None = None) -> np.ndarray:
    """Eval-mode logits for ``images``, computed ``batch_size`` samples at a time.

    When ``taps`` is a dict, per-batch intermediate values are concatenated
    into it along the batch axis.
    """
    out = []
    collected: dict[str, list] = {}
    for start in range(0, len(images), batch_size):
        batch_taps = {} if taps is not None else None
        scope = Scope(params, dict(buffers), ad.Tape(record=False), batch_taps)
        x = scope.const(images[start:start + batch_size])
        out.append(forward(spec, scope, x, "eval").value)
        for k, v in (batch_taps or {}).items():
            collected.setdefault(k, []).append(v)
    if taps is not None:
        taps.update({k: np.concatenate(v) if v[0].ndim == 2 else v[0] for k, v in collected.items()})
    return np.concatenate(out)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float((logits.argmax(axis=1) == labels).mean())


def evaluate(spec: ModelSpec, params: dict, buffers: dict, ds: Dataset, batch_size: int) -> float:
    """Top-1 accuracy (percent) in eval mode."""
    return accuracy(predict(spec, params, buffers, ds.images, batch_size), ds.labels)
