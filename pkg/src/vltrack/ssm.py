"""Selective state-space scan kernels.

Diagonal selective SSM with per-token timescale:

    Abar_i = exp(delta_i * A),  Bbar_i = delta_i * B_i
    h_i = Abar_i * h_{i-1} + Bbar_i * x_i
    y_i = C_i . h_i + D * x_i

Shapes (leading batch dims ``...`` are optional and shared by every input):
x, delta: (..., N, D); A: (D, S); B, C: (..., N, S); D: (D,); h0: (..., D, S).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError, TapeError
from .tensor import Tensor, emit_multi


@dataclass
class SsmInputs:
    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    h0: np.ndarray

    def validate(self) -> None:
        x = self.x
        if x.ndim < 2 or x.shape[-2] < 1:
            raise ShapeError(f"x must be (..., N, D) with N >= 1, got {x.shape}")
        n, d = x.shape[-2:]
        lead = x.shape[:-2]
        s = self.A.shape[-1]
        expect = {
            "delta": (self.delta.shape, lead + (n, d)),
            "A": (self.A.shape, (d, s)),
            "B": (self.B.shape, lead + (n, s)),
            "C": (self.C.shape, lead + (n, s)),
            "D": (self.D.shape, (d,)),
            "h0": (self.h0.shape, lead + (d, s)),
        }
        for name, (got, want) in expect.items():
            if got != want:
                raise ShapeError(f"{name}: shape {got}, expected {want}")
        if not np.all(self.delta > 0):
            raise DomainError("delta must be strictly positive")


@dataclass
class ScanResult:
    y: np.ndarray
    h_final: np.ndarray


def discretize(A, B, delta, zoh_exact: bool = False):
    """Elementwise discretization (arguments broadcast against each other).

    Default is the simplified selective rule ``Bbar = delta * B``; with
    ``zoh_exact`` the exact zero-order hold ``(exp(delta A) - 1) / A * B`` is used.
    """
    A = np.asarray(A, dtype=np.float64) if np.isscalar(A) else np.asarray(A)
    delta = np.asarray(delta)
    if not np.all(delta > 0):
        raise DomainError("discretize: delta must be strictly positive")
    dA = delta * A
    abar = np.exp(dA)
    if zoh_exact:
        bbar = np.expm1(dA) / A * B
    else:
        bbar = delta * B
    return abar, bbar


def _flatten(inp: SsmInputs):
    """Collapse leading batch dims into one axis."""
    lead = inp.x.shape[:-2]
    n, d = inp.x.shape[-2:]
    s = inp.A.shape[-1]
    bt = int(np.prod(lead)) if lead else 1
    return (lead, inp.x.reshape(bt, n, d), inp.delta.reshape(bt, n, d), inp.B.reshape(bt, n, s),
            inp.C.reshape(bt, n, s), inp.h0.reshape(bt, d, s))


def _coefficients(x, delta, A, B, zoh_exact=False):
    """Per-token decay and input terms, each (bt, N, D, S)."""
    dA = delta[..., None] * A
    abar = np.exp(dA)
    if zoh_exact:
        bbar = np.expm1(dA) / A * B[:, :, None, :]
    else:
        bbar = delta[..., None] * B[:, :, None, :]
    return abar, bbar * x[..., None]


def _readout(hs, C, D, x):
    # y_i = sum_s C_is h_ids + D_d x_id
    return (hs @ C[..., None])[..., 0] + D * x


def _check_finite(y, where: str):
    if not np.isfinite(y).all():
        bad = ~np.isfinite(y)
        tok = int(np.argwhere(bad.reshape(-1, *y.shape[-2:]).any(axis=(0, 2)))[0, 0])
        raise NumericError(f"{where}: non-finite value at token {tok}")


def scan_sequential(inp: SsmInputs, zoh_exact: bool = False) -> ScanResult:
    """Reference left-to-right recurrence."""
    inp.validate()
    lead, x, delta, B, C, h0 = _flatten(inp)
    abar, bx = _coefficients(x, delta, inp.A, B, zoh_exact)
    n = x.shape[1]
    hs = np.empty_like(bx)
    h = h0
    for i in range(n):
        h = abar[:, i] * h + bx[:, i]
        hs[:, i] = h
    y = _readout(hs, C, inp.D, x)
    _check_finite(y, "scan_sequential")
    _check_finite(h[:, None, :, 0], "scan_sequential")
    return ScanResult(y.reshape(inp.x.shape), h.reshape(inp.h0.shape))


def linear_recurrence(a: np.ndarray, u: np.ndarray, h0: np.ndarray, chunk: int) -> np.ndarray:
    """All states of ``h_i = a_i * h_{i-1} + u_i`` via a two-level chunked scan.

    a, u: (bt, N, ...); h0: (bt, ...).  Inside each chunk the local scan (from a
    zero state) and the running decay product are computed for all chunks at
    once; chunk carries are then composed with the associative rule
    ``(P1, c1) . (P2, c2) = (P1 P2, P2 c1 + c2)``.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    bt, n = a.shape[:2]
    rest = a.shape[2:]
    nc = -(-n // chunk)
    pad = nc * chunk - n
    if pad:
        a = np.concatenate([a, np.ones((bt, pad) + rest, dtype=a.dtype)], axis=1)
        u = np.concatenate([u, np.zeros((bt, pad) + rest, dtype=u.dtype)], axis=1)
    a = a.reshape((bt, nc, chunk) + rest)
    u = u.reshape((bt, nc, chunk) + rest)
    loc = np.empty_like(u)
    prod = np.empty_like(a)
    loc[:, :, 0] = u[:, :, 0]
    prod[:, :, 0] = a[:, :, 0]
    for j in range(1, chunk):
        np.multiply(a[:, :, j], loc[:, :, j - 1], out=loc[:, :, j])
        loc[:, :, j] += u[:, :, j]
        np.multiply(prod[:, :, j - 1], a[:, :, j], out=prod[:, :, j])
    starts = np.empty((bt, nc) + rest, dtype=u.dtype)
    carry = h0
    for c in range(nc):
        starts[:, c] = carry
        carry = prod[:, c, -1] * carry + loc[:, c, -1]
    hs = loc + prod * starts[:, :, None]
    return hs.reshape((bt, nc * chunk) + rest)[:, :n]


def scan_chunked(inp: SsmInputs, chunk: int, zoh_exact: bool = False) -> ScanResult:
    """Same contract as :func:`scan_sequential`, evaluated chunk-wise."""
    inp.validate()
    res, _ = _scan_states(inp, chunk, zoh_exact)
    return res


def _scan_states(inp: SsmInputs, chunk: int, zoh_exact: bool = False):
    lead, x, delta, B, C, h0 = _flatten(inp)
    abar, bx = _coefficients(x, delta, inp.A, B, zoh_exact)
    hs = linear_recurrence(abar, bx, h0, chunk)
    y = _readout(hs, C, inp.D, x)
    _check_finite(y, "scan_chunked")
    h_final = hs[:, -1]
    _check_finite(h_final[:, None, :, 0], "scan_chunked")
    return ScanResult(y.reshape(inp.x.shape), h_final.reshape(inp.h0.shape)), hs


def default_chunk(n: int) -> int:
    return max(1, int(round(np.sqrt(n))))


def scan_backward(inp: SsmInputs, hs: np.ndarray, gy: np.ndarray | None,
                  gh_final: np.ndarray | None, chunk: int | None = None) -> dict[str, np.ndarray]:
    """Gradients of a (y, h_final) scan w.r.t. every input.

    ``hs`` are the saved hidden states from the forward pass, shape (bt, N, D, S).
    The adjoint state obeys the reversed recurrence
    ``lam_i = C_i gy_i + Abar_{i+1} lam_{i+1}`` seeded with ``gh_final``.
    """
    if hs is None:
        raise TapeError("scan_backward: forward states were not saved")
    lead, x, delta, B, C, h0 = _flatten(inp)
    A = inp.A
    bt, n, d = x.shape
    s = A.shape[-1]
    if gy is None:
        gy = np.zeros_like(x)
    else:
        gy = gy.reshape(bt, n, d)
    if gh_final is None:
        gh_final = np.zeros_like(h0)
    else:
        gh_final = gh_final.reshape(bt, d, s)
    chunk = chunk or default_chunk(n)

    abar = np.exp(delta[..., None] * A)
    gh_direct = gy[..., None] * C[:, :, None, :]
    a_rev = np.concatenate([np.ones_like(abar[:, :1]), abar[:, :0:-1]], axis=1)
    lam = linear_recurrence(a_rev, gh_direct[:, ::-1], gh_final, chunk)[:, ::-1]

    h_prev = np.concatenate([h0[:, None], hs[:, :-1]], axis=1)
    g_da = lam * h_prev * abar
    gu_b = (lam @ B[..., None])[..., 0]
    g_delta = (g_da * A).sum(-1) + gu_b * x
    g_x = gy * inp.D + delta * gu_b
    g_A = np.einsum("bnds,bnd->ds", g_da, delta)
    g_B = (((delta * x)[:, :, None, :]) @ lam)[:, :, 0, :]
    g_C = (gy[:, :, None, :] @ hs)[:, :, 0, :]
    g_D = (gy * x).sum(axis=(0, 1))
    g_h0 = abar[:, 0] * lam[:, 0]
    return {
        "x": g_x.reshape(inp.x.shape),
        "delta": g_delta.reshape(inp.delta.shape),
        "A": g_A,
        "B": g_B.reshape(inp.B.shape),
        "C": g_C.reshape(inp.C.shape),
        "D": g_D,
        "h0": g_h0.reshape(inp.h0.shape),
    }


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   h0: Tensor) -> tuple[Tensor, Tensor]:
    """Tape-aware scan returning ``(y, h_final)``; runs the compiled fused loops."""
    from . import _kernels

    inp = SsmInputs(x.data, delta.data, A.data, B.data, C.data, D.data, h0.data)
    inp.validate()
    lead, xf, dtf, Bf, Cf, h0f = _flatten(inp)
    xf, dtf, Bf, Cf, h0f = (np.ascontiguousarray(v) for v in (xf, dtf, Bf, Cf, h0f))
    Ad = np.ascontiguousarray(A.data)
    Dd = np.ascontiguousarray(D.data)
    bt, n, d = xf.shape
    s = Ad.shape[1]
    hs = np.empty((bt, n, d, s), dtype=xf.dtype)
    y = np.empty_like(xf)
    _kernels.scan_forward(xf, dtf, Ad, Bf, Cf, Dd, h0f, hs, y)
    _check_finite(y, "selective_scan")
    h_final = hs[:, -1]
    _check_finite(h_final[:, None, :, 0], "selective_scan")

    def vjp(gs):
        gy, ghf = gs
        gy = np.zeros_like(xf) if gy is None else np.ascontiguousarray(gy.reshape(bt, n, d))
        ghf = np.zeros_like(h0f) if ghf is None else np.ascontiguousarray(ghf.reshape(bt, d, s))
        gx = np.empty_like(xf)
        gdt = np.empty_like(dtf)
        gA = np.zeros_like(Ad)
        gB = np.zeros_like(Bf)
        gC = np.zeros_like(Cf)
        gD = np.zeros_like(Dd)
        gh0 = np.empty_like(h0f)
        _kernels.scan_backward(xf, dtf, Ad, Bf, Cf, Dd, h0f, hs, gy, ghf,
                               gx, gdt, gA, gB, gC, gD, gh0)
        return (gx.reshape(x.shape), gdt.reshape(delta.shape), gA, gB.reshape(B.shape),
                gC.reshape(C.shape), gD, gh0.reshape(h0.shape))

    return emit_multi("selective_scan", (x, delta, A, B, C, D, h0),
                      (y.reshape(x.shape), h_final.reshape(h0.shape)), vjp)
