"""Batch normalization, squeeze-and-excitation, and dynamic normalization.

Layer state lives in the flat parameter/buffer dicts of a :class:`~dynorm.layers.Scope`
under ``<layer>/<param>`` names:

* BN: ``gamma``, ``beta``; buffers ``running_mean``, ``running_var``.
* SE: ``se.fc1.weight``, ``se.fc1.bias``, ``se.fc2.weight``, ``se.fc2.bias``.
* DN-B: ``fc1.weight`` (no bias), ``fc2.weight`` (grouped), ``fc2.bias``; BN buffers.
* DN-C-A: ``fc1_mean.weight``, ``fc1_std.weight``, ``fc2.weight``, ``fc2.bias``.
* DN-C-B: ``fc1_mean.weight``, ``fc1_std.weight``, ``fc2_mean.weight``,
  ``fc2_mean.bias``, ``fc2_std.weight``.

Dynamic layers own no static gamma/beta. The generator's last FC emits 2C
values per row: the first C are the scale, the last C the shift. Its weights
start at zero and its bias at (1..1, 0..0), so a fresh dynamic layer computes
exactly ``BN(gamma=1, beta=0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import Node
from .layers import ConfigError, Scope, fc, global_avg_pool

OUP = "oup"
DN_VARIANTS = ("dnb", "dnc-a", "dnc-b")
MOMENTUM = 0.1
EPS = 1e-5


@dataclass(frozen=True)
class SCModuleConfig:
    """Shape of the scale/shift generator for a layer with ``channels`` channels.

    ``r`` divides the first FC's width down to ``hidden = channels // r``.
    ``g`` is the number of hidden channels read by each group of the second FC,
    or ``"oup"`` for a single dense group.
    """
    channels: int
    r: int = 16
    g: int | str = 1

    def __post_init__(self):
        c, r, g = self.channels, self.r, self.g
        if not isinstance(r, int) or r < 1 or c % r:
            raise ConfigError(f"r={r} must be a positive divisor of channels={c}")
        if g != OUP and (not isinstance(g, int) or g < 1):
            raise ConfigError(f"g must be a positive int or 'oup', got {g!r}")
        width = self.group_width
        if self.hidden % width:
            raise ConfigError(f"g={g} does not divide hidden width {self.hidden}")
        if (2 * c) % self.groups:
            raise ConfigError(f"{self.groups} groups do not divide 2C={2 * c}")

    @property
    def hidden(self) -> int:
        return self.channels // self.r

    @property
    def group_width(self) -> int:
        """Effective input channels per group, ``min(g, hidden)``."""
        return self.hidden if self.g == OUP else min(self.g, self.hidden)

    @property
    def groups(self) -> int:
        return self.hidden // self.group_width

    def param_count(self) -> int:
        c = self.channels
        return c * self.hidden + self.group_width * 2 * c + 2 * c

    def mult_adds(self) -> int:
        return self.channels * self.hidden + self.group_width * 2 * self.channels


def parse_g(g) -> int | str:
    if isinstance(g, str) and g != OUP:
        return int(g)
    return g


# parameter initialization -------------------------------------------------

def init_bn(prefix: str, channels: int) -> tuple[dict, dict]:
    params = {f"{prefix}/gamma": T.ones((channels,)), f"{prefix}/beta": T.zeros((channels,))}
    return params, init_running(prefix, channels)


def init_running(prefix: str, channels: int) -> dict:
    return {f"{prefix}/running_mean": T.zeros((channels,)),
            f"{prefix}/running_var": T.ones((channels,))}


def _he(shape, fan_in: int, rng) -> np.ndarray:
    return T.normal(shape, rng, 0.0, float(np.sqrt(2.0 / fan_in)))


def init_se(prefix: str, channels: int, r: int, rng: np.random.Generator) -> dict:
    if r < 1 or channels % r:
        raise ConfigError(f"r={r} must divide channels={channels}")
    hidden = channels // r
    return {
        f"{prefix}/se.fc1.weight": _he((hidden, channels), channels, rng),
        f"{prefix}/se.fc1.bias": T.zeros((hidden,)),
        f"{prefix}/se.fc2.weight": _he((channels, hidden), hidden, rng),
        f"{prefix}/se.fc2.bias": T.zeros((channels,)),
    }


def _identity_bias(channels: int) -> np.ndarray:
    return np.concatenate([T.ones((channels,)), T.zeros((channels,))])


def init_dn(prefix: str, cfg: SCModuleConfig, variant: str, rng: np.random.Generator) -> tuple[dict, dict]:
    """Identity-initialized dynamic layer: params and running-stat buffers."""
    c, hid, gw = cfg.channels, cfg.hidden, cfg.group_width
    p = f"{prefix}/"
    if variant == "dnb":
        params = {p + "fc1.weight": _he((hid, c), c, rng),
                  p + "fc2.weight": T.zeros((2 * c, gw)),
                  p + "fc2.bias": _identity_bias(c)}
    elif variant == "dnc-a":
        params = {p + "fc1_mean.weight": _he((hid, c), c, rng),
                  p + "fc1_std.weight": _he((hid, c), c, rng),
                  p + "fc2.weight": T.zeros((2 * c, gw)),
                  p + "fc2.bias": _identity_bias(c)}
    elif variant == "dnc-b":
        params = {p + "fc1_mean.weight": _he((hid, c), c, rng),
                  p + "fc1_std.weight": _he((hid, c), c, rng),
                  p + "fc2_mean.weight": T.zeros((2 * c, gw)),
                  p + "fc2_mean.bias": _identity_bias(c),
                  p + "fc2_std.weight": T.zeros((2 * c, gw))}
    else:
        raise ConfigError(f"unknown dynamic variant {variant!r}")
    return params, init_running(prefix, c)


def dn_param_count(cfg: SCModuleConfig, variant: str) -> int:
    c, hid, gw = cfg.channels, cfg.hidden, cfg.group_width
    if variant == "dnb":
        return cfg.param_count()
    if variant == "dnc-a":
        return 2 * c * hid + gw * 2 * c + 2 * c
    if variant == "dnc-b":
        return 2 * c * hid + 2 * gw * 2 * c + 2 * c
    raise ConfigError(f"unknown dynamic variant {variant!r}")


def dn_mult_adds(cfg: SCModuleConfig, variant: str) -> int:
    c, hid, gw = cfg.channels, cfg.hidden, cfg.group_width
    if variant == "dnb":
        return cfg.mult_adds()
    if variant == "dnc-a":
        return 2 * c * hid + gw * 2 * c
    return 2 * c * hid + 2 * gw * 2 * c


# forward passes -----------------------------------------------------------------

def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def batch_stats(x: Node) -> tuple[Node, Node]:
    """Per-channel mean and population variance over (N, H, W)."""
    return ad.reduce("mean", x, (0, 2, 3)), ad.reduce("var", x, (0, 2, 3))


def _update_running(scope: Scope, prefix: str, mean: np.ndarray, var: np.ndarray,
                    count: int, momentum: float) -> None:
    unbiased = var * (count / (count - 1)) if count > 1 else var
    rm, rv = f"{prefix}/running_mean", f"{prefix}/running_var"
    scope.buffers[rm] = (1.0 - momentum) * scope.buffers[rm] + momentum * mean
    scope.buffers[rv] = (1.0 - momentum) * scope.buffers[rv] + momentum * unbiased


def normalize(scope: Scope, prefix: str, x: Node, mode: str, momentum: float = MOMENTUM,
              eps: float = EPS) -> tuple[Node, Node, Node]:
    """Mean/variance normalization without affine; returns (x_tilde, mean, var).

    Train mode uses batch statistics (gradients flow through them) and updates
    the running buffers; eval mode uses the running buffers as constants.
    """
    _check_mode(mode)
    if x.value.ndim != 4:
        raise T.ShapeError(f"expected NCHW input, got {x.shape}")
    if mode == "train":
        mean, var = batch_stats(x)
        n, _, h, w = x.shape
        _update_running(scope, prefix, mean.value, var.value, n * h * w, momentum)
    else:
        mean = scope.const(scope.buffers[f"{prefix}/running_mean"])
        var = scope.const(scope.buffers[f"{prefix}/running_var"])
    std = ad.sqrt(var + eps)
    return (x - mean) / std, mean, var


def bn_forward(scope: Scope, prefix: str, x: Node, mode: str, momentum: float = MOMENTUM,
               eps: float = EPS) -> Node:
    xt, _, _ = normalize(scope, prefix, x, mode, momentum, eps)
    return xt * scope.param(f"{prefix}/gamma") + scope.param(f"{prefix}/beta")


def se_attention(scope: Scope, prefix: str, x: Node) -> Node:
    """Per-sample channel weights ``sigmoid(fc2(relu(fc1(gap(x)))))``, shape (N, C)."""
    h = ad.relu(fc(scope, f"{prefix}/se.fc1", global_avg_pool(x)))
    return ad.sigmoid(fc(scope, f"{prefix}/se.fc2", h))


def se_forward(scope: Scope, prefix: str, x: Node) -> Node:
    alpha = se_attention(scope, prefix, x)
    scope.tap(f"{prefix}/se_alpha", alpha)
    return x * alpha


def se_bn_forward(scope: Scope, prefix: str, x: Node, mode: str, momentum: float = MOMENTUM,
                  eps: float = EPS) -> Node:
    """SE recalibration followed by BN, the composed baseline."""
    return bn_forward(scope, prefix, se_forward(scope, prefix, x), mode, momentum, eps)


def sc_module_forward(scope: Scope, prefix: str, features: Node, cfg: SCModuleConfig) -> tuple[Node, Node]:
    """(N, C) features -> per-row scale and shift, each (N, C)."""
    if features.value.ndim != 2 or features.shape[1] != cfg.channels:
        raise T.ShapeError(f"features {features.shape} do not match C={cfg.channels}")
    h = ad.relu(fc(scope, f"{prefix}/fc1", features))
    out = fc(scope, f"{prefix}/fc2", h, cfg.groups)
    c = cfg.channels
    return ad.slice_channels(out, 0, c), ad.slice_channels(out, c, 2 * c)


def dnb_forward(scope: Scope, prefix: str, x: Node, cfg: SCModuleConfig, mode: str,
                momentum: float = MOMENTUM, eps: float = EPS) -> Node:
    """Normalize with BN statistics, then apply per-sample generated scale and shift."""
    xt, _, _ = normalize(scope, prefix, x, mode, momentum, eps)
    alpha, lam = sc_module_forward(scope, prefix, global_avg_pool(x), cfg)
    scope.tap(f"{prefix}/alpha", alpha)
    scope.tap(f"{prefix}/lambda", lam)
    return xt * alpha + lam


def dnc_forward(scope: Scope, prefix: str, x: Node, cfg: SCModuleConfig, variant: str, mode: str,
                momentum: float = MOMENTUM, eps: float = EPS) -> Node:
    """Normalize, then apply one scale/shift pair generated from the batch statistics.

    The generator reads the per-channel mean and ``sqrt(var + eps)`` of the
    statistics used for normalization (batch in train mode, running in eval).
    ``dnc-a`` merges the two branches by summing after the first FC,
    ``dnc-b`` after the second.
    """
    if variant not in ("dnc-a", "dnc-b"):
        raise ConfigError(f"unknown DN-C variant {variant!r}")
    xt, mean, var = normalize(scope, prefix, x, mode, momentum, eps)
    c = cfg.channels
    e = ad.reshape(mean, (1, c))
    s = ad.reshape(ad.sqrt(var + eps), (1, c))
    p = f"{prefix}/"
    if variant == "dnc-a":
        h = ad.relu(fc(scope, p + "fc1_mean", e) + fc(scope, p + "fc1_std", s))
        out = fc(scope, p + "fc2", h, cfg.groups)
    else:
        hm = ad.relu(fc(scope, p + "fc1_mean", e))
        hs = ad.relu(fc(scope, p + "fc1_std", s))
        out = fc(scope, p + "fc2_mean", hm, cfg.groups) + fc(scope, p + "fc2_std", hs, cfg.groups)
    alpha = ad.reshape(ad.slice_channels(out, 0, c), (c,))
    lam = ad.reshape(ad.slice_channels(out, c, 2 * c), (c,))
    scope.tap(f"{prefix}/alpha", alpha)
    scope.tap(f"{prefix}/lambda", lam)
    return xt * alpha + lam


def dn_forward(scope: Scope, prefix: str, x: Node, cfg: SCModuleConfig, variant: str, mode: str,
               momentum: float = MOMENTUM, eps: float = EPS) -> Node:
    if variant == "dnb":
        return dnb_forward(scope, prefix, x, cfg, mode, momentum, eps)
    return dnc_forward(scope, prefix, x, cfg, variant, mode, momentum, eps)
