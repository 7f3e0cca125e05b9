"""Dense float64 tensors.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C (row-major)
order, NCHW for images. The functions here are the only arithmetic the rest
of the package relies on, and they enforce a deliberately narrow broadcasting
rule so every result has an obvious loop oracle:

* equal shapes;
* a per-channel vector ``(C,)`` against any tensor whose axis 1 has extent C;
* a per-sample, per-channel matrix ``(N, C)`` against ``(N, C, H, W)``;
* a 0-d scalar against anything.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64
MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes are invalid or incompatible."""


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds {MAX_RANK}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give bit-identical streams.

    ``seed`` may be an int or a sequence of ints (e.g. ``(seed, epoch)``).
    """
    return np.random.Generator(np.random.PCG64(seed))


def zeros(shape) -> np.ndarray:
    return np.zeros(check_shape(shape), dtype=DTYPE)


def ones(shape) -> np.ndarray:
    return np.ones(check_shape(shape), dtype=DTYPE)


def full(shape, value: float) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=DTYPE)


def normal(shape, rng: np.random.Generator, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    return rng.normal(mean, std, size=check_shape(shape)).astype(DTYPE, copy=False)


def uniform(shape, rng: np.random.Generator, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if lo > hi:
        raise ValueError(f"need lo <= hi, got {lo} > {hi}")
    return rng.uniform(lo, hi, size=check_shape(shape)).astype(DTYPE, copy=False)


def create(kind: str, shape, *, value: float = 0.0, mean: float = 0.0, std: float = 1.0,
           lo: float = 0.0, hi: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch on ``kind`` in {zeros, ones, fill, normal, uniform}."""
    if kind == "zeros":
        return zeros(shape)
    if kind == "ones":
        return ones(shape)
    if kind == "fill":
        return full(shape, value)
    if kind in ("normal", "uniform"):
        if rng is None:
            raise ValueError(f"{kind} needs an rng")
        if kind == "normal":
            return normal(shape, rng, mean, std)
        return uniform(shape, rng, lo, hi)
    raise ValueError(f"unknown tensor kind {kind!r}")


def broadcast_operand(b: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Return ``b`` reshaped so numpy broadcasting realizes the allowed rule."""
    target = tuple(target)
    if b.shape == target:
        return b
    if b.ndim == 0:
        return b
    if b.ndim == 1 and len(target) >= 2 and b.shape[0] == target[1]:
        return b.reshape((1, -1) + (1,) * (len(target) - 2))
    if b.ndim == 2 and len(target) == 4 and b.shape == target[:2]:
        return b.reshape(b.shape + (1, 1))
    raise ShapeError(f"cannot broadcast {b.shape} against {target}")


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` (inverse of :func:`broadcast_operand`)."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    if len(shape) == 1:
        axes = (0,) + tuple(range(2, grad.ndim))
        return grad.sum(axis=axes)
    return grad.sum(axis=(2, 3))


_EW = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def ew(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``a op b``. Division by zero yields inf/NaN, never an error."""
    try:
        fn = _EW[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    b = broadcast_operand(np.asarray(b, dtype=DTYPE), a.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return fn(a, b)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    return a @ b


def _axes(x: np.ndarray, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ShapeError(f"axis {a} out of range for rank {x.ndim}")
    return tuple(sorted({a % x.ndim for a in axes}))


def reduce(op: str, x: np.ndarray, axes=None) -> np.ndarray:
    """Reduce over ``axes`` (all when None), dropping them from the shape.

    ``var`` is the population (divide-by-count) variance.
    """
    ax = _axes(x, axes)
    if any(x.shape[a] == 0 for a in ax):
        raise ShapeError("cannot reduce over an empty axis")
    if op not in ("sum", "mean", "var"):
        raise ValueError(f"unknown reduction {op!r}")
    # overflow propagates as inf; the trainer detects it
    with np.errstate(over="ignore", invalid="ignore"):
        if op == "sum":
            return x.sum(axis=ax)
        if op == "mean":
            return x.mean(axis=ax)
        mu = x.mean(axis=ax, keepdims=True)
        return ((x - mu) ** 2).mean(axis=ax)


def reshape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return np.ascontiguousarray(x).reshape(shape)


def permute(x: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{axes} is not a permutation of rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes))


def dumps(x: np.ndarray) -> str:
    """Text form: ``shape: d0 d1 ...`` then one value per line, 17 significant digits."""
    x = np.asarray(x, dtype=DTYPE)
    lines = ["shape: " + " ".join(str(d) for d in x.shape)]
    lines.extend(format(float(v), ".17g") for v in x.ravel())
    return "\n".join(lines) + "\n"


def loads(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("shape:"):
        raise ValueError("missing 'shape:' header")
    return _parse_block(lines[0], lines[1:])


def _parse_block(header: str, body: list[str]) -> np.ndarray:
    shape = tuple(int(d) for d in header[len("shape:"):].split())
    n = int(np.prod(shape))
    if len(body) != n:
        raise ValueError(f"expected {n} values for shape {shape}, found {len(body)}")
    return np.array([float(v) for v in body], dtype=DTYPE).reshape(shape)


def dump_named(tensors: dict[str, np.ndarray]) -> str:
    """Serialize named tensors: each block is ``name: <name>`` followed by :func:`dumps`."""
    parts = [f"name: {name}\n" + dumps(tensors[name]) for name in tensors]
    return "".join(parts)


def load_named(text: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].startswith("name: "):
            raise ValueError(f"line {i + 1}: expected 'name: ...'")
        name = lines[i][len("name: "):]
        header = lines[i + 1]
        shape = tuple(int(d) for d in header[len("shape:"):].split())
        n = int(np.prod(shape))
        out[name] = _parse_block(header, lines[i + 2:i + 2 + n])
        i += 2 + n
    return out
