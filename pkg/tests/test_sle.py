import numpy as np
import pytest
from hypothesis import given, strategies as st

from vltrack import tensor as T
from vltrack.layout import ModalityLayout
from vltrack.sle import (EPS, gamma, global_selective_map, init_sle, sle_forward, window_linear_attention,
                         window_starts)
from vltrack.tensor import Tensor


def phi(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def windowed_oracle(q, k, v, w, starts=None):
    """Loop over tokens and their windows; floor the denominator like the production op."""
    n = q.shape[-2]
    out = np.empty(q.shape[:-1] + (v.shape[-1],))
    for i in range(n):
        lo = max(0, i - w + 1) if starts is None else starts[i]
        fk = phi(k[..., lo:i + 1, :])
        fq = phi(q[..., i, :])
        s = np.einsum("...jd,...d->...j", fk, fq)
        num = np.einsum("...j,...je->...e", s, v[..., lo:i + 1, :])
        out[..., i, :] = num / np.maximum(s.sum(-1), EPS)[..., None]
    return out


def global_linear_attention(q, k, v):
    """Causal global linear attention through running prefix sums."""
    fq, fk = phi(q), phi(k)
    kv = np.cumsum(fk[..., :, :, None] * v[..., :, None, :], axis=-3)
    ks = np.cumsum(fk, axis=-2)
    num = np.einsum("...nd,...nde->...ne", fq, kv)
    den = np.einsum("...nd,...nd->...n", fq, ks)
    return num / den[..., None]


def direct_conv(x, w, b):
    """Hand-unrolled same-padded token-axis convolution."""
    n = x.shape[-2]
    k = w.shape[0]
    half = k // 2
    out = np.zeros(x.shape[:-1] + (w.shape[2],))
    for i in range(n):
        for t in range(k):
            j = i + t - half
            if 0 <= j < n:
                out[..., i, :] += x[..., j, :] @ w[t]
    return out + b


def _qkv(rng, n=10, d=4, lead=(2,)):
    return [rng.normal(size=lead + (n, d)) for _ in range(3)]


def _params(rng, d=6):
    p = init_sle(rng, d, 3, dtype=np.float64)
    for name in p.__dataclass_fields__:
        t = getattr(p, name)
        t.data = rng.normal(size=t.shape) * 0.5
    p.gate_g.data = 1.0 + 0.2 * rng.normal(size=d)
    return p


# ---------------------------------------------------------------- global selective map

def test_conv_constant_signal(rng):
    p = _params(rng)
    p.conv_b.data[:] = 0.0
    G = np.full((1, 7, 6), 0.8)
    out = global_selective_map(Tensor(G), p).data
    want = 0.8 * p.conv_w.data.sum(axis=(0, 1))
    np.testing.assert_allclose(out[0, 1:-1], np.broadcast_to(want, (5, 6)), atol=1e-12)


def test_conv_single_token(rng):
    p = _params(rng)
    G = rng.normal(size=(1, 1, 6))
    out = global_selective_map(Tensor(G), p).data
    np.testing.assert_allclose(out[0, 0], G[0, 0] @ p.conv_w.data[1] + p.conv_b.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_direct(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng)
    G = rng.normal(size=(2, 12, 6))
    out = global_selective_map(Tensor(G), p).data
    assert np.abs(out - direct_conv(G, p.conv_w.data, p.conv_b.data)).max() < 1e-12


# ---------------------------------------------------------------- window attention

def test_window_one_is_identity(rng):
    q, k, v = _qkv(rng)
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), 1).data
    assert np.abs(out - v).max() < 1e-12


def test_equal_keys_average_values(rng):
    q, k, v = _qkv(rng, n=9)
    k[:] = k[..., :1, :]
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), 3).data
    for i in range(9):
        lo = max(0, i - 2)
        np.testing.assert_allclose(out[..., i, :], v[..., lo:i + 1, :].mean(-2), atol=1e-12)


@pytest.mark.parametrize("w", [10, 11, 40])
def test_full_window_matches_global(rng, w):
    q, k, v = _qkv(rng)
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), w).data
    assert np.abs(out - global_linear_attention(q, k, v)).max() < 1e-10


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 12), st.integers(1, 14))
def test_matches_window_oracle(seed, w, n):
    rng = np.random.default_rng(seed)
    q, k, v = _qkv(rng, n=n)
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), w).data
    assert np.abs(out - windowed_oracle(q, k, v, w)).max() < 1e-10


def test_causality_probes():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(3, 16))
        w = int(rng.integers(1, 9))
        q, k, v = _qkv(rng, n=n, lead=())
        base = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), w).data
        j = int(rng.integers(1, n))
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        for arr in (q2, k2, v2):
            arr[j] += rng.normal(size=arr.shape[-1])
        out = window_linear_attention(Tensor(q2), Tensor(k2), Tensor(v2), w).data
        assert np.array_equal(out[:j], base[:j])


def test_denominator_positive_and_finite(rng):
    q, k, v = (x * 30 for x in _qkv(rng))
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), 4).data
    assert np.all(np.isfinite(out))


def test_segment_masked_starts():
    layout = ModalityLayout(2, 3, 4)
    s = window_starts(9, 8, layout, segment_masked=True)
    assert s.tolist() == [0, 0, 2, 2, 2, 5, 5, 5, 5]
    assert window_starts(9, 3).tolist() == [0, 0, 0, 1, 2, 3, 4, 5, 6]


def test_segment_masked_matches_oracle(rng):
    layout = ModalityLayout(2, 3, 4)
    starts = window_starts(9, 8, layout, True)
    q, k, v = _qkv(rng, n=9)
    out = window_linear_attention(Tensor(q), Tensor(k), Tensor(v), 8, starts).data
    assert np.abs(out - windowed_oracle(q, k, v, 8, starts)).max() < 1e-12


def test_window_validation():
    with pytest.raises(ValueError):
        window_starts(4, 0)


@pytest.mark.parametrize("w", [1, 3, 20])
def test_window_attention_finite_differences(w):
    # the first token (and every token when w = 1) ignores its query and key, so
    # some gradients are exactly zero; score with a mixed absolute/relative bound
    rng = np.random.default_rng(w)
    ts = [Tensor(a, requires_grad=True) for a in _qkv(rng, n=7, d=3)]
    wt = Tensor(rng.normal(size=ts[2].shape))
    loss = lambda: T.sum_(T.mul(window_linear_attention(*ts, w), wt))  # noqa: E731
    with T.Tape() as tape:
        out = loss()
    T.backward(tape, out)
    for t in ts:
        num = np.zeros_like(t.data)
        for i in np.ndindex(t.shape):
            for sign in (1.0, -1.0):
                t.data[i] += sign * 1e-6
                num[i] += sign * float(loss().data) / 2e-6
                t.data[i] -= sign * 1e-6
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-9)
    assert np.abs(ts[0].grad[..., 0, :]).max() < 1e-12


# ---------------------------------------------------------------- block

def _zero(t):
    t.data = np.zeros_like(t.data)


def test_degenerate_block_is_identity(rng):
    d = 6
    p = _params(rng, d)
    _zero(p.conv_w)
    _zero(p.conv_b)
    _zero(p.w_in_gate)
    p.b_in_gate.data = np.ones(d)
    _zero(p.w_res_gate)
    _zero(p.b_res_gate)
    G = rng.normal(size=(2, 8, d))
    # with w = 1 the attention returns its values; an identity value map gives back h = G
    p.w_v.data = np.eye(d)
    out = sle_forward(Tensor(G), p, window=1).data
    assert np.abs(out - G).max() < 1e-12


def test_pure_residual(rng):
    d = 6
    p = _params(rng, d)
    _zero(p.w_v)
    _zero(p.w_res_gate)
    p.b_res_gate.data = np.ones(d)
    G = rng.normal(size=(1, 8, d))
    assert np.array_equal(sle_forward(Tensor(G), p, window=4).data, G)


def test_block_compositional_oracle(rng):
    d = 6
    p = _params(rng, d)
    G = rng.normal(size=(2, 11, d))
    out = sle_forward(Tensor(G), p, window=4).data
    a_l = direct_conv(G, p.conv_w.data, p.conv_b.data)
    mu = G.mean(-1, keepdims=True)
    gn = (G - mu) / np.sqrt(G.var(-1, keepdims=True) + 1e-5) * p.gate_g.data + p.gate_b.data
    in_gate = gn @ p.w_in_gate.data + p.b_in_gate.data
    res_gate = gn @ p.w_res_gate.data + p.b_res_gate.data
    h = a_l + in_gate * G
    want = windowed_oracle(h @ p.w_q.data, h @ p.w_k.data, h @ p.w_v.data, 4) + res_gate * G
    assert np.abs(out - want).max() < 1e-10


def test_gamma_is_window_attention(rng):
    p = _params(rng)
    h = rng.normal(size=(1, 5, 6))
    a = gamma(Tensor(h), p, 3).data
    b = windowed_oracle(h @ p.w_q.data, h @ p.w_k.data, h @ p.w_v.data, 3)
    assert np.abs(a - b).max() < 1e-12


def test_block_finite_differences(rng):
    d = 4
    p = _params(rng, d)
    G = Tensor(rng.normal(size=(1, 6, d)), requires_grad=True)
    w = Tensor(rng.normal(size=G.shape))
    params = [G] + [getattr(p, f) for f in p.__dataclass_fields__]
    assert T.finite_diff_check(lambda: T.sum_(T.mul(sle_forward(G, p, 3), w)), params) < 1e-5
