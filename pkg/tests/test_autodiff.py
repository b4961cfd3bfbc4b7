import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from soundalign import autodiff as ad
from soundalign.autodiff import Tensor
from soundalign.errors import ContractError, NumericError, ShapeError

TOL = 1e-4
INSTANCES = 20

# frozen from mpmath at 50 digits
SOFTMAX_123 = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
GELU_REF = {0.5: 0.34573123063700655182, -1.3: -0.1258406299612934331}


def rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def test_matmul_examples():
    a = ad.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(a.data, [[1, 2], [3, 4]])
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradcheck_tight():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert ad.gradcheck(lambda: ad.mse(ad.matmul(a, b), np.zeros((3, 2))), [a, b]) < 1e-6


def test_softmax_examples():
    assert np.allclose(ad.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]], atol=0)
    assert np.array_equal(ad.softmax_rows([[1000.0, 1000.0]]).data, [[0.5, 0.5]])
    assert np.allclose(ad.softmax_rows([[1.0, 2.0, 3.0]]).data[0], SOFTMAX_123, rtol=1e-14, atol=0)
    with pytest.raises(NumericError):
        ad.softmax_rows([[np.nan, 1.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax_rows(x).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) < 1e-12)
    assert np.all((y > 0) & (y <= 1))


def test_gelu_values():
    y = ad.gelu(np.array(list(GELU_REF))).data
    assert np.allclose(y, list(GELU_REF.values()), rtol=1e-14, atol=0)


def test_gelu_gradcheck_tight():
    x = rand(np.random.default_rng(2), 7)
    assert ad.gradcheck(lambda: ad.mse(ad.gelu(x), np.zeros(7)), [x]) < 1e-6


def test_mse_examples():
    x = np.array([0.3, -0.2])
    assert ad.mse(x, x).item() == 0.0
    assert ad.mse([1.0, 0.0], [0.0, 0.0]).item() == 0.5
    with pytest.raises(ShapeError):
        ad.mse(np.ones(3), np.ones(2))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.add(rand(np.random.default_rng(0), 2, 2), 1.0).backward()


def test_linear_mse_gradient_matches_fd():
    rng = np.random.default_rng(3)
    w = rand(rng, 4, 3)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    assert ad.gradcheck(lambda: ad.mse(ad.matmul(x, w), y), [w]) < 1e-6


def test_disconnected_parameter_keeps_zero_grad():
    rng = np.random.default_rng(4)
    used, unused = rand(rng, 3), rand(rng, 3)
    ad.mse(used, np.zeros(3)).backward()
    assert np.all(unused.grad == 0)
    assert np.any(used.grad != 0)


def test_gradients_accumulate_without_zeroing():
    rng = np.random.default_rng(5)
    w = rand(rng, 3)
    ad.mse(w, np.ones(3)).backward()
    first = w.grad.copy()
    ad.mse(w, np.ones(3)).backward()
    assert np.allclose(w.grad, 2 * first)


def test_backward_is_deterministic():
    rng = np.random.default_rng(6)
    w1, b1, w2 = rand(rng, 4, 8), rand(rng, 8), rand(rng, 8, 2)
    x = rng.normal(size=(3, 4))

    def loss():
        return ad.mse(ad.matmul(ad.gelu(ad.add(ad.matmul(x, w1), b1)), w2), np.zeros((3, 2)))

    grads = []
    for _ in range(2):
        for p in (w1, b1, w2):
            p.zero_grad()
        loss().backward()
        grads.append([p.grad.copy() for p in (w1, b1, w2)])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


def test_chained_mlp_gradcheck():
    rng = np.random.default_rng(7)
    w1, b1, w2, b2 = rand(rng, 4, 6), rand(rng, 6), rand(rng, 6, 3), rand(rng, 3)
    x, y = rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (5, 3))
    fn = lambda: ad.mse(ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, w1), b1)), w2), b2), y)
    assert ad.gradcheck(fn, [w1, b1, w2, b2]) < TOL


def test_trace_records_ops():
    rng = np.random.default_rng(8)
    a, b = rand(rng, 2, 3), rand(rng, 3, 2)
    nodes = ad.trace(ad.mse(ad.matmul(a, b), np.zeros((2, 2))))
    assert [n.op for n in nodes if n.op != "leaf"] == ["matmul", "mse"]


# one builder per differentiable op: (params, fn) from an rng; every op is
# followed by an mse against a random target so the output is scalar
def _case(name, rng):
    tgt = lambda shape: rng.uniform(-1, 1, size=shape)
    p, q, r = (int(v) for v in rng.integers(1, 5, size=3))
    if name == "matmul":
        a, b = rand(rng, p, q), rand(rng, q, r)
        y = tgt((p, r))
        return [a, b], lambda: ad.mse(ad.matmul(a, b), y)
    if name == "add_broadcast":
        a, b = rand(rng, p, q), rand(rng, q)
        y = tgt((p, q))
        return [a, b], lambda: ad.mse(ad.add(a, b), y)
    if name == "sub":
        a, b = rand(rng, p, q), rand(rng, p, q)
        y = tgt((p, q))
        return [a, b], lambda: ad.mse(ad.sub(a, b), y)
    if name == "scale":
        a = rand(rng, p, q)
        s = float(rng.uniform(-2, 2))
        y = tgt((p, q))
        return [a], lambda: ad.mse(ad.scale(a, s), y)
    if name == "gelu":
        a = rand(rng, p, q)
        y = tgt((p, q))
        return [a], lambda: ad.mse(ad.gelu(a), y)
    if name == "softmax_rows":
        a = rand(rng, p, q + 1)
        y = tgt((p, q + 1))
        return [a], lambda: ad.mse(ad.softmax_rows(a), y)
    if name == "transpose":
        a = rand(rng, p, q)
        y = tgt((q, p))
        return [a], lambda: ad.mse(ad.transpose(a), y)
    if name == "reshape":
        a = rand(rng, p, q)
        y = tgt((p * q,))
        return [a], lambda: ad.mse(ad.reshape(a, (p * q,)), y)
    if name == "rows":
        a = rand(rng, p + 1, q)
        y = tgt((1, q))
        return [a], lambda: ad.mse(ad.rows(a, 1, 2), y)
    if name == "cols":
        a = rand(rng, p, q + 1)
        y = tgt((p, q))
        return [a], lambda: ad.mse(ad.cols(a, 1, q + 1), y)
    if name == "concat_cols":
        a, b = rand(rng, p, q), rand(rng, p, r)
        y = tgt((p, q + r))
        return [a, b], lambda: ad.mse(ad.concat_cols([a, b]), y)
    if name == "mean_rows":
        a = rand(rng, p, q)
        y = tgt((1, q))
        return [a], lambda: ad.mse(ad.mean_rows(a), y)
    if name == "total":
        a, b = rand(rng, p, q), rand(rng, p, q)
        y1, y2 = tgt((p, q)), tgt((p, q))
        return [a, b], lambda: ad.total([ad.mse(a, y1), ad.scale(ad.mse(b, y2), 0.3)])
    if name == "mse":
        a, b = rand(rng, p, q), rand(rng, p, q)
        return [a, b], lambda: ad.mse(a, b)
    raise KeyError(name)


OPS = ["matmul", "add_broadcast", "sub", "scale", "gelu", "softmax_rows", "transpose", "reshape",
       "rows", "cols", "concat_cols", "mean_rows", "total", "mse"]


@pytest.mark.parametrize("op", OPS)
def test_op_gradcheck_random_instances(op):
    worst = 0.0
    for i in range(INSTANCES):
        params, fn = _case(op, np.random.default_rng([11, OPS.index(op), i]))
        worst = max(worst, ad.gradcheck(fn, params, eps=1e-5))
    assert worst < TOL, f"{op}: worst relative error {worst:.2e}"
