"""Built-in oracle checks run by ``vlt selftest``.

Each check compares a production path against an independent computation on
small seeded cases and returns the observed error; a check passes when the
error is under its tolerance.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .heads import Box, contrastive_value, decode, giou, modality_select, init_heads
from .hmss import DirectionalStates, hmss_forward, init_hmss
from .layout import ModalityLayout
from .nn import make_rng
from .sle import window_linear_attention
from .ssm import SsmInputs, scan_chunked, scan_sequential
from .temf import StateSpaceMemory, TemfConfig, init_temf, temf_forward
from .tensor import Tensor


def _scan_case(rng, n, d=3, s=4):
    return SsmInputs(rng.normal(size=(2, n, d)), rng.uniform(0.01, 0.5, size=(2, n, d)),
                     -rng.uniform(0.1, 2.0, size=(d, s)), rng.normal(size=(2, n, s)),
                     rng.normal(size=(2, n, s)), rng.normal(size=d), rng.normal(size=(2, d, s)))


def check_scan() -> float:
    rng = make_rng(11)
    worst = 0.0
    for n in (1, 5, 16, 40):
        inp = _scan_case(rng, n)
        ref = scan_sequential(inp)
        for chunk in (1, 3, 8, n):
            worst = max(worst, float(np.abs(scan_chunked(inp, chunk).y - ref.y).max()))
        # explicit unroll of the recurrence as a sum over source tokens
        a = np.exp(inp.delta[..., None] * inp.A)
        u = inp.delta[..., None] * inp.B[..., None, :] * inp.x[..., None]
        y = np.empty_like(inp.x)
        for i in range(n):
            h = np.prod(a[:, :i + 1], axis=1) * inp.h0
            for j in range(i + 1):
                h = h + np.prod(a[:, j + 1:i + 1], axis=1) * u[:, j]
            y[:, i] = (h * inp.C[:, i, None, :]).sum(-1) + inp.D * inp.x[:, i]
        worst = max(worst, float(np.abs(y - ref.y).max()))
    return worst


def check_gradients() -> float:
    rng = make_rng(12)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = Tensor(1.0 + 0.1 * rng.normal(size=2), requires_grad=True)

    def f():
        y = T.layer_norm(T.tanh(T.matmul(a, b)), g, None)
        return T.sum_(T.mul(T.softmax(y, axis=-1), T.silu(y)))

    return T.finite_diff_check(f, [a, b, g])


def check_hmss_symmetry() -> float:
    rng = make_rng(13)
    p = init_hmss(rng, 6, 8, 4, dtype=np.float64)
    p.a_log_beta.data = p.a_log_alpha.data.copy()
    G = Tensor(rng.normal(size=(2, 9, 6)))
    layout = ModalityLayout(0, 3, 6)
    h0 = Tensor(rng.normal(size=(2, 8, 4)))
    out, fin = hmss_forward(G, layout, p, DirectionalStates(h0, h0))
    return max(float(np.abs(fin.h_alpha.data - fin.h_beta.data).max()), 0.0)


def check_sle_window() -> float:
    rng = make_rng(14)
    q, k, v = (Tensor(rng.normal(size=(2, 10, 4))) for _ in range(3))
    ident = float(np.abs(window_linear_attention(q, k, v, 1).data - v.data).max())
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))  # noqa: E731
    fq, fk = phi(q.data), phi(k.data)
    s = np.tril(fq @ np.swapaxes(fk, -1, -2))
    ref = (s @ v.data) / s.sum(-1, keepdims=True)
    glob = float(np.abs(window_linear_attention(q, k, v, 10).data - ref).max())
    return max(ident, glob)


def check_memory_endpoints() -> float:
    rng = make_rng(15)
    cfg = TemfConfig(M=2, d_model=6, d_state=3, inner_ratio=2, window=4)
    params = init_temf(rng, cfg, dtype=np.float64)
    for lvl in params.levels:
        lvl.a_logit.data = np.array(np.inf)
    layout = ModalityLayout(2, 3, 4)
    G1 = Tensor(rng.normal(size=(1, 9, 6)))
    outs = []
    for hist in range(2):
        mem = StateSpaceMemory(params)
        temf_forward(Tensor(rng.normal(size=(1, 9, 6)) * (hist + 1)), layout, params, mem, cfg)
        outs.append(temf_forward(G1, layout, params, mem, cfg).data)
    return float(np.abs(outs[0] - outs[1]).max())


def check_losses() -> float:
    err = abs(contrastive_value(0.3, [0.3] * 8, 1.0) - math.log(9))
    a = Tensor(np.array([0.0, 0.0, 1.0, 1.0]))
    b = Tensor(np.array([1.0, 1.0, 2.0, 2.0]))
    err = max(err, abs(float(giou(a, a)[0].data) - 1.0), abs(1.0 - float(giou(a, b)[0].data) - 1.5))
    heads = init_heads(make_rng(16), 6, 3, dtype=np.float64)
    rng = make_rng(17)
    clues = modality_select(Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6))), heads.selector)
    err = max(err, float(np.abs(clues.w_l.data + clues.w_z.data - 1.0).max()))
    return err


def check_decode() -> float:
    center = np.zeros(16)
    center[10] = 1.0
    box, _, cell = decode(center, np.full((16, 2), 0.5), np.full((16, 2), 0.25))
    want = Box((2 + 0.5) / 4, (2 + 0.5) / 4, 0.25, 0.25)
    return float(np.abs(box.as_array() - want.as_array()).max()) + float(cell != 10)


def check_template_clip() -> float:
    from .harness.tracker import TemplateClip

    clip = TemplateClip(np.zeros((2, 2, 3)), capacity=3, threshold=0.8)
    bad = 0
    bad += clip.offer(np.ones((2, 2, 3)), 0.79)
    for i in range(6):
        bad += not clip.offer(np.full((2, 2, 3), i), 0.81)
        bad += len(clip) > 3 or clip.entries[0].confidence != 1.0
    return float(bad)


CHECKS: list[tuple[str, Callable[[], float], float]] = [
    ("scan chunked/sequential/unrolled", check_scan, 1e-10),
    ("finite-difference gradients", check_gradients, 1e-5),
    ("hybrid scan ordering symmetry", check_hmss_symmetry, 1e-10),
    ("window attention identity/global", check_sle_window, 1e-10),
    ("memory blend endpoint a=1", check_memory_endpoints, 0.0),
    ("loss closed forms", check_losses, 1e-12),
    ("box decode", check_decode, 1e-12),
    ("template clip contract", check_template_clip, 0.0),
]


def run_all(verbose: bool = False) -> list[str]:
    failures = []
    for name, fn, tol in CHECKS:
        t0 = time.perf_counter()
        err = fn()
        ok = err <= tol
        if not ok:
            failures.append(name)
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:36s} err={err:.3g} tol={tol:g} "
                  f"({time.perf_counter() - t0:.2f}s)")
    return failures
