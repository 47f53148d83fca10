"""Small building blocks on top of the tensor primitives."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; ``stream`` selects an independent sub-stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=stream)))


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype, gain: float = 1.0) -> Tensor:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-lim, lim, size=(fan_in, fan_out)), dtype)


def const_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full(x.shape, value, dtype=x.dtype))


def bcast(v: Tensor, like: Tensor) -> Tensor:
    return T.broadcast(v, like.shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    if b is not None:
        y = T.add(y, T.broadcast(b, y.shape))
    return y


def elu1(x: Tensor) -> Tensor:
    return T.shift(T.elu(x), 1.0)


def l2norm(x: Tensor, axis: int = -1, floor: float = 1e-8) -> Tensor:
    sq = T.sum_(T.mul(x, x), axis=axis)
    return T.sqrt(T.maximum(sq, const_like(sq, floor * floor)))


def cosine_rows(a: Tensor, b: Tensor, floor: float = 1e-8) -> Tensor:
    """Pairwise cosine similarity of rows: a (..., n, d), b (..., m, d) -> (..., n, m)."""
    na = l2norm(a, floor=floor)
    nb = l2norm(b, floor=floor)
    an = T.div(a, T.broadcast(T.reshape(na, na.shape + (1,)), a.shape))
    bn = T.div(b, T.broadcast(T.reshape(nb, nb.shape + (1,)), b.shape))
    perm = list(range(bn.ndim - 2)) + [bn.ndim - 1, bn.ndim - 2]
    return T.matmul(an, T.permute(bn, perm))


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists of them and yield ``(dotted_name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, (Tensor, list)) or dataclasses.is_dataclass(val):
                yield from iter_tensors(val, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for i, val in enumerate(obj):
            yield from iter_tensors(val, f"{prefix}.{i}")
