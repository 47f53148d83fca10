import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vltrack import tensor as T
from vltrack.errors import DTypeError, NumericError, RankError, ShapeError, TapeError
from vltrack.tensor import Tensor


def _t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)


# Each case: (name, builder(rng) -> (inputs, fn(*inputs) -> Tensor))
def _cases():
    def unary(fn, gen=None):
        def build(rng):
            x = _t(gen(rng) if gen else rng.normal(size=(3, 4)))
            return [x], fn
        return build

    def binary(fn, gen_b=None):
        def build(rng):
            a = _t(rng.normal(size=(3, 4)))
            b = _t(gen_b(rng) if gen_b else rng.normal(size=(3, 4)))
            return [a, b], fn
        return build

    def minmax(fn):
        def build(rng):
            a = rng.normal(size=(3, 4))
            b = a + rng.choice([-1, 1], size=a.shape) * rng.uniform(0.1, 1.0, size=a.shape)
            return [_t(a), _t(b)], fn
        return build

    pos = lambda rng: rng.uniform(0.3, 2.0, size=(3, 4))  # noqa: E731
    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, lambda rng: pos(rng) * rng.choice([-1, 1], size=(3, 4))),
        "maximum": minmax(T.maximum),
        "minimum": minmax(T.minimum),
        "neg": unary(T.neg),
        "scale": unary(lambda x: T.scale(x, -2.5)),
        "shift": unary(lambda x: T.shift(x, 0.7)),
        "exp": unary(T.exp),
        "log": unary(T.log, pos),
        "sqrt": unary(T.sqrt, pos),
        "abs": unary(T.abs_, lambda rng: _away_from_zero(rng, (3, 4))),
        "sigmoid": unary(T.sigmoid),
        "softplus": unary(T.softplus),
        "silu": unary(T.silu),
        "tanh": unary(T.tanh),
        "relu": unary(T.relu, lambda rng: _away_from_zero(rng, (3, 4))),
        "elu": unary(T.elu, lambda rng: _away_from_zero(rng, (3, 4))),
        "sum": unary(lambda x: T.sum_(x, axis=1)),
        "mean": unary(lambda x: T.mean(x, axis=0, keepdims=True)),
        "softmax": unary(lambda x: T.softmax(x, axis=-1)),
        "logsumexp": unary(lambda x: T.logsumexp(x, axis=0)),
        "layer_norm": lambda rng: (
            [_t(rng.normal(size=(3, 5))), _t(1 + 0.3 * rng.normal(size=5)), _t(rng.normal(size=5))],
            lambda x, g, b: T.layer_norm(x, g, b)),
        "matmul": lambda rng: ([_t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))], T.matmul),
        "matmul_batched": lambda rng: ([_t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(2, 4, 2)))],
                                       T.matmul),
        "conv1d": lambda rng: ([_t(rng.normal(size=(2, 5, 3))), _t(rng.normal(size=(3, 3, 2))),
                                _t(rng.normal(size=2))], T.conv1d),
        "concat": lambda rng: ([_t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 2)))],
                               lambda a, b: T.concat([a, b], axis=1)),
        "slice": unary(lambda x: x[1:, ::2]),
        "take": unary(lambda x: T.take(x, [2, 0, 2, 3], axis=1)),
        "take_along": unary(lambda x: T.take_along(x, np.array([[0, 3], [1, 1], [2, 0]]), axis=1)),
        "permute": lambda rng: ([_t(rng.normal(size=(2, 3, 4)))], lambda x: T.permute(x, (2, 0, 1))),
        "reshape": unary(lambda x: T.reshape(x, (2, 6))),
        "broadcast": lambda rng: ([_t(rng.normal(size=(3, 1)))], lambda x: T.broadcast(x, (2, 3, 4))),
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        inputs, fn = CASES[name](rng)
        w_rng = np.random.default_rng(10_000 + seed)
        probe = fn(*inputs)
        w = Tensor(w_rng.normal(size=probe.shape))
        worst = max(worst, T.finite_diff_check(lambda: T.sum_(T.mul(fn(*inputs), w)), inputs))
    assert worst < 1e-6, f"{name}: {worst}"


def test_catalog_covers_every_primitive_tested():
    tested = {n.replace("_batched", "") for n in CASES}
    assert tested <= set(T.CATALOG)
    assert set(T.CATALOG) - tested == set()


def test_matmul_identity():
    X = np.random.default_rng(0).normal(size=(3, 7))
    assert np.array_equal(T.eval_op("matmul", Tensor(np.eye(3)), Tensor(X)).data, X)


def test_softplus_zero():
    assert T.eval_op("softplus", Tensor(np.zeros(()))).item() == pytest.approx(math.log(2), abs=1e-15)


def test_conv1d_hand_example():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1))
    k = Tensor(np.ones((3, 1, 1)))
    out = T.conv1d(x, k, Tensor(np.zeros(1)))
    assert out.data.reshape(-1).tolist() == [3.0, 6.0, 5.0]


def test_square_gradient():
    x = _t(3.0)
    with T.Tape() as tape:
        y = T.mul(x, x)
    T.backward(tape, y)
    assert x.grad == pytest.approx(6.0)


def test_sum_of_product_matmul_rule():
    rng = np.random.default_rng(1)
    A, B = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))
    with T.Tape() as tape:
        y = T.sum_(T.matmul(A, B))
    T.backward(tape, y)
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T, atol=1e-14)
    np.testing.assert_allclose(B.grad, A.data.T @ np.ones((3, 2)), atol=1e-14)


def test_reused_input_accumulates():
    x = _t(np.array([1.5, -2.0]))
    with T.Tape() as tape:
        y = T.sum_(T.add(T.mul(x, x), T.scale(x, 3.0)))
    T.backward(tape, y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_rejects_non_scalar():
    x = _t(np.ones(3))
    with T.Tape() as tape:
        y = T.exp(x)
    with pytest.raises(RankError):
        T.backward(tape, y)


def test_backward_single_use_and_detached():
    x = _t(2.0)
    with T.Tape() as tape:
        y = T.mul(x, x)
    T.backward(tape, y)
    with pytest.raises(TapeError):
        T.backward(tape, y)
    with T.Tape() as other:
        pass
    with pytest.raises(TapeError):
        T.backward(other, y)


def test_no_tape_records_nothing():
    x = _t(np.ones(2))
    with T.Tape() as tape:
        with T.no_tape():
            T.exp(x)
        assert len(tape) == 0
        T.exp(x)
        assert len(tape) == 1


def test_constants_do_not_record():
    with T.Tape() as tape:
        T.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert len(tape) == 0


def test_tape_is_topological():
    x = _t(np.ones(3))
    with T.Tape() as tape:
        a = T.exp(x)
        b = T.mul(a, x)
        T.sum_(b)
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs)
        seen.update(id(o) for o in node.outputs)


def test_shape_mismatch_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_dtype_mixing_rejected():
    with pytest.raises(DTypeError):
        T.add(Tensor(np.ones(2, np.float32)), Tensor(np.ones(2, np.float64)))


def test_finite_diff_examples():
    x = _t(2.0)
    assert T.finite_diff_check(lambda: T.mul(x, x), [x]) < 1e-8
    c = _t(np.ones(3))
    assert T.finite_diff_check(lambda: Tensor(np.array(4.0)), [c]) == 0.0
    assert np.array_equal(c.grad if c.grad is not None else np.zeros(3), np.zeros(3))


def test_finite_diff_non_finite_raises():
    x = _t(-1.0)
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        T.finite_diff_check(lambda: T.log(x), [x])


@given(st.integers(0, 2 ** 31 - 1))
def test_eval_is_pure(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    for name in ("softmax", "layer_norm", "tanh", "softplus"):
        a = T.eval_op(name, Tensor(x)).data
        b = T.eval_op(name, Tensor(x.copy())).data
        assert a.tobytes() == b.tobytes()


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 1))
def test_softmax_sums_to_one(seed, axis):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(4, 6))
    s = T.softmax(Tensor(x), axis=axis).data.sum(axis=axis)
    assert np.abs(s - 1.0).max() < 1e-12


def test_f32_stays_f32():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_(T.exp(x))
    T.backward(tape, y)
    assert y.dtype == np.float32 and x.grad.dtype == np.float32


def test_independent_tapes_in_threads():
    results = {}

    def work(k):
        x = _t(float(k))
        with T.Tape() as tape:
            y = T.mul(x, x)
        T.backward(tape, y)
        results[k] = float(x.grad)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 5)}
