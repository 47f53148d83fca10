"""Compiled fused loops behind the tape-level selective scan.

The numpy kernels in :mod:`vltrack.ssm` materialize (N, D, S) coefficient
tensors; these loops keep the recurrence in registers instead, which is what
makes CPU training affordable.  Both paths are cross-checked in the tests.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def scan_forward(x, dt, A, B, C, D, h0, hs, y):
    bt, n, d = x.shape
    s = A.shape[1]
    h = np.empty(s, dtype=x.dtype)
    for b in range(bt):
        for k in range(d):
            for j in range(s):
                h[j] = h0[b, k, j]
            for i in range(n):
                dtv = dt[b, i, k]
                xv = x[b, i, k]
                acc = D[k] * xv
                for j in range(s):
                    hv = math.exp(dtv * A[k, j]) * h[j] + dtv * B[b, i, j] * xv
                    h[j] = hv
                    hs[b, i, k, j] = hv
                    acc += C[b, i, j] * hv
                y[b, i, k] = acc


@numba.njit(cache=True)
def scan_backward(x, dt, A, B, C, D, h0, hs, gy, ghf, gx, gdt, gA, gB, gC, gD, gh0):
    bt, n, d = x.shape
    s = A.shape[1]
    lam = np.empty(s, dtype=x.dtype)
    for b in range(bt):
        for k in range(d):
            for j in range(s):
                lam[j] = ghf[b, k, j]
            for i in range(n - 1, -1, -1):
                dtv = dt[b, i, k]
                xv = x[b, i, k]
                gyv = gy[b, i, k]
                gxa = gyv * D[k]
                gD[k] += gyv * xv
                gdta = 0.0
                for j in range(s):
                    hv = hs[b, i, k, j]
                    l = lam[j] + gyv * C[b, i, j]
                    gC[b, i, j] += gyv * hv
                    if i > 0:
                        hp = hs[b, i - 1, k, j]
                    else:
                        hp = h0[b, k, j]
                    ab = math.exp(dtv * A[k, j])
                    gda = l * hp * ab
                    gdta += gda * A[k, j] + l * B[b, i, j] * xv
                    gA[k, j] += gda * dtv
                    gxa += l * B[b, i, j] * dtv
                    gB[b, i, j] += l * dtv * xv
                    lam[j] = l * ab
                gdt[b, i, k] = gdta
                gx[b, i, k] = gxa
            for j in range(s):
                gh0[b, k, j] = lam[j]
