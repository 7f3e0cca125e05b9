"""Seeded finite-difference checks for every differentiable layer.

Each check builds small random inputs (at most 64 elements per tensor), contracts
the layer output with a fixed random tensor to get a scalar, and compares the
tape gradients of every input group against central differences.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import normalization as nz
from . import tensor as T
from .layers import Scope, conv2d, grouped_fc, softmax_cross_entropy

# layers whose forward path contains a variance or square root
VARIANCE_LAYERS = frozenset({"bn", "dnb", "dnc-a", "dnc-b"})
LAYERS = ("conv", "fc", "gfc", "bn", "se", "dnb", "dnc-a", "dnc-b", "loss")
STEP = 1e-5


def tolerance(layer: str) -> float:
    return 1e-4 if layer in VARIANCE_LAYERS else 1e-5


def _contract(out: ad.Node, proj: np.ndarray) -> ad.Node:
    return ad.reduce("sum", out * out.tape.const(proj))


def _case(layer: str, rng: np.random.Generator):
    """(loss function over a dict of nodes, dict of arrays) for ``layer``."""
    def rand(*shape, scale=1.0):
        return T.normal(shape, rng, 0.0, scale)

    if layer == "conv":
        stride = int(rng.integers(1, 3))
        arrays = {"x": rand(2, 2, 4, 4), "weight": rand(3, 2, 3, 3), "bias": rand(3)}
        ho = (4 + 2 - 3) // stride + 1
        proj = rand(2, 3, ho, ho)
        return (lambda n: _contract(conv2d(n["x"], n["weight"], n["bias"], stride, 1), proj)), arrays

    if layer in ("fc", "gfc"):
        groups = 1 if layer == "fc" else 2
        arrays = {"x": rand(4, 8), "weight": rand(6, 8 // groups), "bias": rand(6)}
        proj = rand(4, 6)
        return (lambda n: _contract(grouped_fc(n["x"], n["weight"], n["bias"], groups), proj)), arrays

    if layer == "loss":
        labels = rng.integers(0, 5, size=4)
        return (lambda n: softmax_cross_entropy(n["logits"], labels)), {"logits": rand(4, 5, scale=2.0)}

    x = rand(4, 4, 2, 2, scale=2.0) + rand(1, 4, 1, 1)
    proj = rand(4, 4, 2, 2)
    buffers = nz.init_running("l", 4)

    if layer == "bn":
        arrays = {"x": x, "l/gamma": 1.0 + rand(4, scale=0.3), "l/beta": rand(4)}
        fwd = lambda s, xn: nz.bn_forward(s, "l", xn, "train")
    elif layer == "se":
        arrays = {"x": x, "l/se.fc1.weight": rand(2, 4), "l/se.fc1.bias": rand(2),
                  "l/se.fc2.weight": rand(4, 2), "l/se.fc2.bias": rand(4)}
        fwd = lambda s, xn: nz.se_forward(s, "l", xn)
    else:
        cfg = nz.SCModuleConfig(4, 2, 1)
        params, _ = nz.init_dn("l", cfg, layer, rng)
        # move away from the identity init so every group receives gradient
        arrays = {"x": x, **{k: v + rand(*v.shape, scale=0.5) for k, v in params.items()}}
        fwd = lambda s, xn: nz.dn_forward(s, "l", xn, cfg, layer, "train")

    def loss(nodes):
        scope = Scope({k: v for k, v in nodes.items() if k != "x"}, dict(buffers), nodes["x"].tape)
        return _contract(fwd(scope, nodes["x"]), proj)
    return loss, arrays


def check_layer(layer: str, seed: int = 0, h: float = STEP) -> dict[str, float]:
    """Max relative error per input group for one seeded instance of ``layer``."""
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}; choose from {', '.join(LAYERS)}")
    f, arrays = _case(layer, T.make_rng((seed, LAYERS.index(layer))))
    return ad.grad_check_all(f, arrays, h)
