"""Dense tensors and a reverse-mode differentiation tape.

Storage is numpy (row-major, f32 or f64).  Every primitive records a node on
the active :class:`Tape` when one of its inputs requires a gradient; calling
:func:`backward` replays the tape in reverse and fills ``grad`` on the leaves.

Broadcasting is never implicit: elementwise binary ops demand equal shapes and
:func:`broadcast` is the only way to expand a tensor.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DTypeError, NumericError, RankError, ShapeError, TapeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # sugar over the primitives below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def full(shape, value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "inputs", "outputs", "vjp")

    def __init__(self, op, inputs, outputs, vjp):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nodes are appended in execution order, which is
    already a topological order.  A tape supports a single backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.consumed = False

    def record(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Callable):
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        self.nodes.append(_Node(op, tuple(inputs), tuple(outputs), vjp))
        for o in outputs:
            self._produced.add(id(o))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


class no_tape:
    """Suspend recording inside the block (inference paths)."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(output)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Returns the raw gradient table keyed by ``id(tensor)`` (used by tests).
    """
    if output.shape != ():
        raise RankError(f"backward needs a 0-dim output, got shape {output.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward")
    if not tape.produced(output):
        raise TapeError("output was not produced on this tape (detached)")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=output.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gins = node.vjp(gouts if len(gouts) > 1 else gouts[0])
        for inp, g in zip(node.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if not tape.produced(inp):
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
    tape.nodes = []
    return grads


# ---------------------------------------------------------------------------
# primitive plumbing


def _check_dtype(op: str, inputs: Sequence[Tensor]) -> np.dtype:
    dt = inputs[0].dtype
    for t in inputs[1:]:
        if t.dtype != dt:
            raise DTypeError(f"{op}: dtype mix {dt.name} vs {t.dtype.name}")
    return dt


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def emit(op: str, inputs: Sequence[Tensor], out_data, vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and record one node; ``vjp(g) -> grads per input``."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape.record(op, inputs, (out,), vjp)
    return out


def emit_multi(op: str, inputs: Sequence[Tensor], out_datas, vjp: Callable) -> tuple[Tensor, ...]:
    """Multi-output variant; ``vjp`` receives a list with ``None`` for unused outputs."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = []
    for d in out_datas:
        o = Tensor.__new__(Tensor)
        o.data = d
        o.requires_grad = needs
        o.grad = None
        outs.append(o)
    if needs:
        tape.record(op, inputs, outs, vjp)
    return tuple(outs)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}; broadcast constants explicitly")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype("add", (a, b))
    _same_shape("add", a, b)
    return emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype("sub", (a, b))
    _same_shape("sub", a, b)
    return emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype("mul", (a, b))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtype("div", (a, b))
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return emit("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("maximum", (a, b))
    _same_shape("maximum", a, b)
    pick = a.data >= b.data
    return emit("maximum", (a, b), np.where(pick, a.data, b.data),
                lambda g: (np.where(pick, g, 0.0), np.where(pick, 0.0, g)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("minimum", (a, b))
    _same_shape("minimum", a, b)
    pick = a.data <= b.data
    return emit("minimum", (a, b), np.where(pick, a.data, b.data),
                lambda g: (np.where(pick, g, 0.0), np.where(pick, 0.0, g)))


def neg(x: Tensor) -> Tensor:
    return emit("neg", (x,), -x.data, lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return emit("scale", (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return emit("shift", (x,), x.data + c, lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return emit("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return emit("abs", (x,), np.abs(x.data), lambda g: (g * sgn,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return emit("softplus", (x,), np.logaddexp(0.0, xd).astype(xd.dtype, copy=False),
                lambda g: (g * _sigmoid(xd),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return emit("silu", (x,), xd * s, lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return emit("relu", (x,), np.where(pos, x.data, 0.0).astype(x.dtype), lambda g: (g * pos,))


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg_part = np.expm1(np.minimum(xd, 0.0))
    pos = xd > 0
    out = np.where(pos, xd, neg_part)
    return emit("elu", (x,), out, lambda g: (np.where(pos, g, g * (neg_part + 1.0)),))


# ---------------------------------------------------------------------------
# reductions and normalizations


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = np.sum(x.data, axis=ax, keepdims=keepdims)
    kshape = tuple(1 if i in ax else s for i, s in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kshape), shape),)

    return emit("sum", (x,), np.asarray(out), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    n = 1
    for a in ax:
        n *= shape[a]
    out = np.mean(x.data, axis=ax, keepdims=keepdims)
    kshape = tuple(1 if i in ax else s for i, s in enumerate(shape))
    inv = x.dtype.type(1.0 / n)

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kshape) * inv, shape),)

    return emit("mean", (x,), np.asarray(out), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return emit("softmax", (x,), out, vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    p = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * p,)

    return emit("logsumexp", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optionally scale by ``gamma`` and add ``beta``."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: affine shape {p.shape} != ({d},)")
    params = [p for p in (gamma, beta) if p is not None]
    _check_dtype("layer_norm", [x, *params])
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g * gamma.data if gamma is not None else g
        gx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append(np.sum(g * xhat, axis=red))
        if beta is not None:
            res.append(np.sum(g, axis=red))
        return tuple(res)

    return emit("layer_norm", (x, *params), out.astype(xd.dtype, copy=False), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` either 2-D (shared across a's leading dims) or batched like ``a``."""
    _check_dtype("matmul", (a, b))
    if b.ndim < 2 or a.ndim < 1:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} vs {b.shape[-2]} ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return emit("matmul", (a, b), ad @ bd, vjp)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")

    def bvjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return emit("matmul", (a, b), ad @ bd, bvjp)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded, stride-1 convolution over the token axis (-2).

    x: (..., N, C_in); weight: (k, C_in, C_out) with k odd; bias: (C_out,).
    """
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel width {k} must be odd")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: channels {x.shape[-1]} vs kernel {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    ins = (x, weight) if bias is None else (x, weight, bias)
    _check_dtype("conv1d", ins)
    n = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    wd = weight.data
    out = xp[..., 0:n, :] @ wd[0]
    for t in range(1, k):
        out = out + xp[..., t:t + n, :] @ wd[t]
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, cout)
        for t in range(k):
            gxp[..., t:t + n, :] += g @ wd[t].T
            gw[t] = xp[..., t:t + n, :].reshape(-1, cin).T @ g2
        res = [gxp[..., pad:pad + n, :], gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return emit("conv1d", ins, out, vjp)


# ---------------------------------------------------------------------------
# structural


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    _check_dtype("concat", xs)
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} vs {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return emit("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=ax), vjp)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, type(Ellipsis))) or isinstance(k, bool):
            raise TypeError("slice_ supports ints, slices and Ellipsis only; use take for index arrays")
    shape, dt = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dt)
        gx[key] = g
        return (gx,)

    return emit("slice", (x,), x.data[key], vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with one shared 1-D integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D")
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise ShapeError(f"take: index out of range for axis size {x.shape[ax]}")
    shape, dt = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dt)
        gm = np.moveaxis(gx, ax, 0)
        np.add.at(gm, idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return emit("take", (x,), np.take(x.data, idx, axis=ax), vjp)


def take_along(x: Tensor, indices, axis: int) -> Tensor:
    """``np.take_along_axis`` with accumulation in the backward pass."""
    ax = axis % x.ndim
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != x.ndim:
        raise ShapeError(f"take_along: index rank {idx.ndim} vs tensor rank {x.ndim}")
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape, dt = x.shape, x.dtype
    full_idx = np.broadcast_to(idx, out.shape)

    def vjp(g):
        gx = np.zeros(shape, dtype=dt)
        grids = list(np.indices(out.shape, sparse=True))
        grids[ax] = full_idx
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return emit("take_along", (x,), out, vjp)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    return emit("permute", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def broadcast(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from exc
    old = x.shape
    lead = len(shape) - len(old)
    expanded = tuple(i + lead for i, s in enumerate(old) if s == 1 and shape[i + lead] != 1)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(e - lead for e in expanded), keepdims=True)
        return (g.reshape(old),)

    return emit("broadcast", (x,), out, vjp)


# ---------------------------------------------------------------------------
# catalog

CATALOG: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "maximum": maximum, "minimum": minimum,
    "neg": neg, "scale": scale, "shift": shift,
    "exp": exp, "log": log, "sqrt": sqrt, "abs": abs_,
    "softplus": softplus, "sigmoid": sigmoid, "silu": silu, "tanh": tanh, "relu": relu, "elu": elu,
    "softmax": softmax, "logsumexp": logsumexp, "mean": mean, "sum": sum_,
    "concat": concat, "slice": slice_, "take": take, "take_along": take_along,
    "permute": permute, "reshape": reshape, "broadcast": broadcast,
    "matmul": matmul, "conv1d": conv1d, "layer_norm": layer_norm,
}


def eval_op(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a catalog primitive by name."""
    try:
        fn = CATALOG[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure.  The parameters'
    storage is perturbed in place and restored afterwards.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("finite_diff_check: non-finite function value")
    if tape.produced(out):
        backward(tape, out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p in params:
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, order="C")
    with no_tape():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("finite_diff_check: non-finite perturbed value")
                num = (fp - fm) / (2.0 * eps)
                a = float(gflat[i])
                err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst
