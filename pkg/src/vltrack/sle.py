"""Selective locality enhancement block.

``h = A_l + B_l(G) * G`` and ``G' = gamma(h) + D_l(G) * G`` where ``A_l`` is a
same-padded token-axis convolution of the block input, ``B_l``/``D_l`` are
affine gates and ``gamma`` is causal sliding-window linear attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layout import ModalityLayout
from .nn import glorot, linear, param
from .tensor import Tensor, emit

EPS = 1e-6


@dataclass
class SleParams:
    conv_w: Tensor   # (k, d, d)
    conv_b: Tensor
    gate_g: Tensor   # layer norm applied before the two gates
    gate_b: Tensor
    w_in_gate: Tensor
    b_in_gate: Tensor
    w_res_gate: Tensor
    b_res_gate: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


def init_sle(rng: np.random.Generator, d_model: int, conv_width: int = 3, dtype=np.float32) -> SleParams:
    d = d_model
    conv = rng.normal(size=(conv_width, d, d)) * (0.5 / np.sqrt(conv_width * d))
    small = lambda: param(rng.normal(size=(d, d)) * (0.1 / np.sqrt(d)), dtype)  # noqa: E731
    return SleParams(
        conv_w=param(conv, dtype),
        conv_b=param(np.zeros(d), dtype),
        gate_g=param(np.ones(d), dtype),
        gate_b=param(np.zeros(d), dtype),
        w_in_gate=small(),
        b_in_gate=param(np.full(d, 0.5), dtype),
        w_res_gate=small(),
        b_res_gate=param(np.ones(d), dtype),
        w_q=glorot(rng, d, d, dtype),
        w_k=glorot(rng, d, d, dtype),
        w_v=glorot(rng, d, d, dtype, gain=0.5),
    )


def global_selective_map(G: Tensor, params: SleParams) -> Tensor:
    return T.conv1d(G, params.conv_w, params.conv_b)


def window_starts(n: int, window: int, layout: ModalityLayout | None = None,
                  segment_masked: bool = False) -> np.ndarray:
    """First token each position attends to (non-decreasing)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    starts = np.maximum(0, np.arange(n) - window + 1)
    if segment_masked and layout is not None:
        starts = np.maximum(starts, np.asarray(layout.segment_starts()))
    return starts.astype(np.intp)


def _phi(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype, copy=False)


def _dphi(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))).astype(x.dtype, copy=False)


def window_linear_attention(q: Tensor, k: Tensor, v: Tensor, window: int,
                            starts: np.ndarray | None = None) -> Tensor:
    """Causal sliding-window linear attention with feature map ``elu + 1``.

    out_i = phi(q_i)^T sum_j phi(k_j) v_j^T / max(phi(q_i)^T sum_j phi(k_j), eps)
    over ``j in [starts_i, i]``.  q, k: (..., N, d); v: (..., N, dv).
    """
    n = q.shape[-2]
    if starts is None:
        starts = window_starts(n, window)
    span = int(np.max(np.arange(n) - starts)) + 1
    offs = np.arange(span)
    idx = np.arange(n)[:, None] - offs[None, :]          # (N, span)
    valid = idx >= starts[:, None]
    idx = np.where(valid, idx, n)                          # row n is a zero pad

    qd, kd, vd = q.data, k.data, v.data
    fq = _phi(qd)
    fk = _phi(kd)
    pad_k = np.concatenate([fk, np.zeros_like(fk[..., :1, :])], axis=-2)
    pad_v = np.concatenate([vd, np.zeros_like(vd[..., :1, :])], axis=-2)
    fkw = pad_k[..., idx, :]                               # (..., N, span, d)
    vw = pad_v[..., idx, :]
    s = (fkw @ fq[..., None])[..., 0]                      # (..., N, span)
    num = (s[..., None, :] @ vw)[..., 0, :]
    den_raw = s.sum(-1)
    den = np.maximum(den_raw, EPS)
    out = num / den[..., None]

    def vjp(g):
        g_num = g / den[..., None]
        g_den = np.where(den_raw >= EPS, -(g * out).sum(-1) / den, 0.0)
        g_s = (vw @ g_num[..., None])[..., 0] + g_den[..., None]
        g_s = g_s * valid
        g_vw = s[..., None] * g_num[..., None, :]
        g_fq = (g_s[..., None, :] @ fkw)[..., 0, :]
        g_fkw = g_s[..., None] * fq[..., None, :]
        g_fk = np.zeros_like(pad_k)
        g_v = np.zeros_like(pad_v)
        for o in range(span):
            col = idx[:, o]
            ok = valid[:, o]
            tgt = col[ok]
            g_fk[..., tgt, :] += g_fkw[..., ok, o, :]
            g_v[..., tgt, :] += g_vw[..., ok, o, :]
        return g_fq * _dphi(qd), g_fk[..., :n, :] * _dphi(kd), g_v[..., :n, :]

    return emit("window_linear_attention", (q, k, v), out.astype(qd.dtype, copy=False), vjp)


def gamma(h: Tensor, params: SleParams, window: int, starts: np.ndarray | None = None) -> Tensor:
    q = T.matmul(h, params.w_q)
    k = T.matmul(h, params.w_k)
    v = T.matmul(h, params.w_v)
    return window_linear_attention(q, k, v, window, starts)


def sle_forward(G: Tensor, params: SleParams, window: int = 8, layout: ModalityLayout | None = None,
                segment_masked: bool = False) -> Tensor:
    n = G.shape[-2]
    if layout is not None:
        layout.check(n)
    starts = window_starts(n, window, layout, segment_masked)
    a_l = global_selective_map(G, params)
    gn = T.layer_norm(G, params.gate_g, params.gate_b)
    in_gate = linear(gn, params.w_in_gate, params.b_in_gate)
    res_gate = linear(gn, params.w_res_gate, params.b_res_gate)
    h = T.add(a_l, T.mul(in_gate, G))
    return T.add(gamma(h, params, window, starts), T.mul(res_gate, G))
