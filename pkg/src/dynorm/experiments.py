"""Robustness sweep: BN vs DN-B under a raised learning rate and a tiny batch.

Each cell trains the toy net from scratch for every seed and records the
final test accuracy. The three trend checks compare seed means:

* base: DN-B is no worse than BN minus a half-point margin;
* high lr: DN-B loses less accuracy than BN when lr is multiplied by 2.5;
* small batch: DN-B beats BN at batch size 4.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import cifar10_splits, synth_dataset
from .model_zoo import build_toycnn
from .trainer import Splits, TrainConfig, train

log = logging.getLogger(__name__)

NORMS = ("bn", "dnb")


@dataclass(frozen=True)
class SweepConfig:
    lr: float = 0.1
    lr_scale: float = 2.5
    batch_size: int = 64
    small_batch: int = 4
    epochs: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 10_000
    n_val: int = 1_000
    margin: float = 0.5
    r: int = 4
    g: int | str = 1


@dataclass
class SweepResult:
    acc: dict = field(default_factory=dict)  # (norm, cell) -> list of test accuracies
    nan: dict = field(default_factory=dict)  # (norm, cell) -> list of onset epochs or None
    seconds: float = 0.0

    def mean(self, norm: str, cell: str) -> float:
        # a diverged run counts as chance-level rather than being dropped
        return float(np.mean([a if a is not None else 10.0 for a in self.acc[(norm, cell)]]))

    def checks(self, margin: float) -> dict[str, tuple[bool, str]]:
        bn, dn = (lambda c: self.mean("bn", c)), (lambda c: self.mean("dnb", c))
        drop_bn, drop_dn = bn("base") - bn("high_lr"), dn("base") - dn("high_lr")
        return {
            "base": (dn("base") >= bn("base") - margin, f"dnb={dn('base'):.2f} bn={bn('base'):.2f}"),
            "high_lr": (drop_dn < drop_bn, f"drop dnb={drop_dn:.2f} bn={drop_bn:.2f}"),
            "small_batch": (dn("small_batch") > bn("small_batch"),
                            f"dnb={dn('small_batch'):.2f} bn={bn('small_batch'):.2f}"),
        }


def cifar_splits(path: str, n_train: int, n_val: int, seed: int = 0) -> Splits:
    return Splits(*cifar10_splits(path, seed, n_train, n_val))


def synth_splits(n_train: int, n_val: int, classes: int = 10, size: int = 32) -> Splits:
    tr = synth_dataset(0, n_train, classes, size)
    stats = (tr.mean, tr.std)
    return Splits(tr, synth_dataset(1, n_val, classes, size, stats), synth_dataset(2, n_val, classes, size, stats))


def cells(cfg: SweepConfig) -> dict[str, tuple[float, int]]:
    return {"base": (cfg.lr, cfg.batch_size), "high_lr": (cfg.lr * cfg.lr_scale, cfg.batch_size),
            "small_batch": (cfg.lr, cfg.small_batch)}


def run_sweep(data: Splits, cfg: SweepConfig) -> SweepResult:
    res = SweepResult()
    start = time.perf_counter()
    c, h, _ = data.train.images.shape[1:]
    for cell, (lr, bs) in cells(cfg).items():
        for norm in NORMS:
            spec = build_toycnn(norm, cfg.r, cfg.g, classes=data.train.classes, image_size=h, in_channels=c)
            for seed in cfg.seeds:
                tcfg = TrainConfig(lr=lr, epochs=cfg.epochs, batch_size=bs, seed=seed, augment=True)
                m = train(spec, data, tcfg).metrics
                res.acc.setdefault((norm, cell), []).append(m.test_acc)
                res.nan.setdefault((norm, cell), []).append(m.nan_onset_epoch)
                log.info("%s %s seed %d: test %s nan %s", cell, norm, seed, m.test_acc, m.nan_onset_epoch)
    res.seconds = time.perf_counter() - start
    return res
