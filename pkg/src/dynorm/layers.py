"""Differentiable building blocks: convolution, (grouped) FC, activations, pooling, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from . import tensor as T
from .autodiff import Node


class ConfigError(ValueError):
    """Invalid layer or module configuration (e.g. a divisibility violation)."""


@dataclass
class ConvParams:
    weight: np.ndarray  # (Cout, Cin, K, K)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0


@dataclass
class FcParams:
    """Weight is stored as (Out, In // groups); groups == 1 is a dense layer."""
    weight: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1

    @property
    def in_features(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def fc_param_count(n_in: int, n_out: int, groups: int = 1, bias: bool = True) -> int:
    check_groups(n_in, n_out, groups)
    return n_in * n_out // groups + (n_out if bias else 0)


def check_groups(n_in: int, n_out: int, groups: int) -> None:
    if groups < 1 or n_in % groups or n_out % groups:
        raise ConfigError(f"groups={groups} must divide in={n_in} and out={n_out}")


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# convolution ----------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, K, K) strided view; no copy
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation with zero padding, NCHW."""
    xv, wv = x.value, weight.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise T.ShapeError(f"conv2d needs rank-4 input and weight, got {xv.shape}, {wv.shape}")
    n, cin, h, w = xv.shape
    cout, wcin, k, k2 = wv.shape
    if wcin != cin or k != k2:
        raise T.ShapeError(f"weight {wv.shape} incompatible with input {xv.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise T.ShapeError(f"output size {ho}x{wo} < 1")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = _windows(xp, k, stride, ho, wo)
    out = np.tensordot(win, wv, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp_x(g):
        cols = np.tensordot(g, wv, axes=([1], [0]))  # (N, Ho, Wo, Cin, K, K)
        gxp = np.zeros(xp.shape, dtype=T.DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            return gxp[:, :, padding:-padding, padding:-padding]
        return gxp

    def vjp_w(g):
        return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))

    node = ad.apply(out, (x, weight), (vjp_x, vjp_w))
    if bias is not None:
        node = ad.add(node, bias)
    return node


# fully connected --------------------------------------------------------------

def grouped_fc(x: Node, weight: Node, bias: Node | None = None, groups: int = 1) -> Node:
    """Block-diagonal linear map; input slice i feeds output slice i.

    ``weight`` has shape (Out, In // groups). Rows of the result depend only on
    the matching input row, bit for bit, whatever the batch size.
    """
    xv, wv = x.value, weight.value
    if xv.ndim != 2 or wv.ndim != 2:
        raise T.ShapeError(f"grouped_fc needs rank-2 operands, got {xv.shape}, {wv.shape}")
    n, n_in = xv.shape
    n_out = wv.shape[0]
    check_groups(n_in, n_out, groups)
    gi, go = n_in // groups, n_out // groups
    if wv.shape[1] != gi:
        raise T.ShapeError(f"weight {wv.shape} does not match in={n_in}, groups={groups}")
    xg = xv.reshape(n, groups, gi)
    wg = wv.reshape(groups, go, gi)
    out = np.einsum("ngi,goi->ngo", xg, wg).reshape(n, n_out)

    def vjp_x(g):
        return np.einsum("ngo,goi->ngi", g.reshape(n, groups, go), wg).reshape(n, n_in)

    def vjp_w(g):
        return np.einsum("ngo,ngi->goi", g.reshape(n, groups, go), xg).reshape(n_out, gi)

    node = ad.apply(out, (x, weight), (vjp_x, vjp_w))
    if bias is not None:
        node = ad.add(node, bias)
    return node


def block_diagonal(weight: np.ndarray, groups: int) -> np.ndarray:
    """Dense (Out, In) matrix equivalent to a grouped weight of shape (Out, In // groups)."""
    n_out, gi = weight.shape
    go = n_out // groups
    dense = np.zeros((n_out, gi * groups), dtype=T.DTYPE)
    for i in range(groups):
        dense[i * go:(i + 1) * go, i * gi:(i + 1) * gi] = weight[i * go:(i + 1) * go]
    return dense


# activations, pooling ---------------------------------------------------------

def activation(kind: str, x: Node) -> Node:
    if kind == "relu":
        return ad.relu(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: Node) -> Node:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.value.ndim != 4:
        raise T.ShapeError(f"global_avg_pool needs rank 4, got {x.shape}")
    return ad.reduce("mean", x, (2, 3))


# loss -------------------------------------------------------------------------

def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Batch-mean of -log softmax(logits)[label], computed with max subtraction."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise T.ShapeError(f"logits {z.shape} and labels {labels.shape} disagree")
    n, k = z.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        s = e.sum(axis=1, keepdims=True)
        logp = shifted - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    probs = e / s

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return d * (g / n)
    return ad.apply(np.asarray(loss), (logits,), (vjp,))


# parameter scope --------------------------------------------------------------

class Scope:
    """Binds flat ``name -> array`` parameter and buffer dicts to one tape.

    Parameters become tape leaves on first use (so their gradients can be read
    back from :attr:`leaves` after ``backward``). Values that are already
    nodes are used as given. Buffers are plain arrays that
    train-mode layers replace in place of the dict. ``taps``, when a dict,
    collects named intermediate values for inspection.
    """

    def __init__(self, params: dict, buffers: dict | None = None, tape: ad.Tape | None = None,
                 taps: dict | None = None):
        self.params = params
        self.buffers = {} if buffers is None else buffers
        self.tape = ad.Tape(record=False) if tape is None else tape
        self.leaves: dict[str, Node] = {}
        self.taps = taps

    def param(self, name: str) -> Node:
        node = self.leaves.get(name)
        if node is None:
            value = self.params[name]
            if isinstance(value, Node):
                node = self.leaves[name] = value
            else:
                node = self.leaves[name] = self.tape.leaf(value, name)
        return node

    def has(self, name: str) -> bool:
        return name in self.params

    def const(self, value) -> Node:
        return self.tape.const(value)

    def tap(self, name: str, node: Node) -> None:
        if self.taps is not None:
            self.taps[name] = node.value


def fc(scope: Scope, prefix: str, x: Node, groups: int = 1) -> Node:
    """Grouped FC using ``<prefix>.weight`` and, if present, ``<prefix>.bias``."""
    bias = scope.param(prefix + ".bias") if scope.has(prefix + ".bias") else None
    return grouped_fc(x, scope.param(prefix + ".weight"), bias, groups)
