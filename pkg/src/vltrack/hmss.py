"""Hybrid multimodal state-space block.

Two left-to-right scans over two segment orderings of the unified sequence:
``alpha = [lang, template, search]`` (text first) and ``beta = [template, lang,
search]`` (template first).  The timescale, input and readout gates (delta, B,
C, D) are generated once per token and reused by both scans; only the decay
matrices differ per ordering.  Outputs are re-aligned to canonical order and
averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import LayoutError, NumericError
from .layout import ModalityLayout
from .nn import glorot, linear, param
from .ssm import selective_scan
from .tensor import Tensor

ORDERS = ("alpha", "beta")


@dataclass
class HmssParams:
    norm_g: Tensor
    norm_b: Tensor
    w_in: Tensor        # (d_model, 2 * d_inner): scan branch and gate branch
    w_dt_down: Tensor   # (d_inner, dt_rank)
    w_dt_up: Tensor     # (dt_rank, d_inner)
    dt_bias: Tensor     # (d_inner,)
    w_b: Tensor         # (d_inner, d_state)
    w_c: Tensor         # (d_inner, d_state)
    a_log_alpha: Tensor  # (d_inner, d_state); A = -exp(a_log)
    a_log_beta: Tensor
    d_skip: Tensor      # (d_inner,)
    w_out: Tensor       # (d_inner, d_model)

    @property
    def d_inner(self) -> int:
        return self.d_skip.shape[0]

    @property
    def d_state(self) -> int:
        return self.w_b.shape[1]


@dataclass
class DirectionalStates:
    h_alpha: Tensor
    h_beta: Tensor

    def get(self, order: str) -> Tensor:
        return self.h_alpha if order == "alpha" else self.h_beta


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_hmss(rng: np.random.Generator, d_model: int, d_inner: int, d_state: int,
              dt_rank: int | None = None, dt_min: float = 1e-3, dt_max: float = 0.1,
              dtype=np.float32) -> HmssParams:
    dt_rank = dt_rank or max(1, d_model // 8)
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    a_log = np.log(np.tile(np.geomspace(1.0, float(d_state), d_state), (d_inner, 1)))
    return HmssParams(
        norm_g=param(np.ones(d_model), dtype),
        norm_b=param(np.zeros(d_model), dtype),
        w_in=glorot(rng, d_model, 2 * d_inner, dtype),
        w_dt_down=glorot(rng, d_inner, dt_rank, dtype),
        w_dt_up=param(rng.uniform(-1, 1, size=(dt_rank, d_inner)) * dt_rank ** -0.5, dtype),
        dt_bias=param(inverse_softplus(dt), dtype),
        w_b=glorot(rng, d_inner, d_state, dtype),
        w_c=glorot(rng, d_inner, d_state, dtype),
        a_log_alpha=param(a_log, dtype),
        a_log_beta=param(a_log.copy(), dtype),
        d_skip=param(np.ones(d_inner), dtype),
        w_out=glorot(rng, d_inner, d_model, dtype, gain=0.5),
    )


def reorder(layout: ModalityLayout, order: str, n_tokens: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Permutation taking canonical order to ``order`` and its inverse.

    ``permuted = canonical[perm]`` and ``canonical = permuted[inv]``.
    """
    if n_tokens is not None:
        layout.check(n_tokens)
    lang = np.arange(*layout.bounds("lang"))
    tmpl = np.arange(*layout.bounds("template"))
    search = np.arange(*layout.bounds("search"))
    if order == "alpha":
        perm = np.concatenate([lang, tmpl, search])
    elif order == "beta":
        perm = np.concatenate([tmpl, lang, search])
    else:
        raise LayoutError(f"unknown scan order {order!r}")
    inv = np.argsort(perm)
    return perm.astype(np.intp), inv.astype(np.intp)


def _is_identity(p: np.ndarray) -> bool:
    return bool(np.all(p == np.arange(p.size)))


def hmss_forward(G: Tensor, layout: ModalityLayout, params: HmssParams,
                 states_in: DirectionalStates) -> tuple[Tensor, DirectionalStates]:
    """G: (B, N, d_model) in canonical order.  Returns (G_out, terminal scan states)."""
    n = G.shape[-2]
    layout.check(n)
    di = params.d_inner
    xn = T.layer_norm(G, params.norm_g, params.norm_b)
    xz = T.matmul(xn, params.w_in)
    x = T.silu(xz[..., :di])
    z = xz[..., di:]
    # gates shared by both orderings, computed once per token
    delta = T.softplus(linear(T.matmul(x, params.w_dt_down), params.w_dt_up, params.dt_bias))
    b_gate = T.matmul(x, params.w_b)
    c_gate = T.matmul(x, params.w_c)

    ys = []
    finals = {}
    for order, a_log in (("alpha", params.a_log_alpha), ("beta", params.a_log_beta)):
        A = T.neg(T.exp(a_log))
        perm, inv = reorder(layout, order)
        ident = _is_identity(perm)
        seq = [x, delta, b_gate, c_gate]
        if not ident:
            seq = [T.take(t, perm, axis=-2) for t in seq]
        try:
            y, h_fin = selective_scan(seq[0], seq[1], A, seq[2], seq[3], params.d_skip,
                                      states_in.get(order))
        except NumericError as exc:
            raise NumericError(f"hmss {order} scan: {exc}") from exc
        if not ident:
            y = T.take(y, inv, axis=-2)
        ys.append(y)
        finals[order] = h_fin
    # (C h^a + D x + C h^b + D x) / 2 == (C h^a + C h^b) / 2 + D x
    y = T.scale(T.add(ys[0], ys[1]), 0.5)
    out = T.matmul(T.mul(y, T.silu(z)), params.w_out)
    return T.add(G, out), DirectionalStates(finals["alpha"], finals["beta"])


def zero_states(params: HmssParams, batch: int, dtype=None) -> DirectionalStates:
    dtype = dtype or params.d_skip.dtype
    shape = (batch, params.d_inner, params.d_state)
    return DirectionalStates(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))
