import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fragspec import tensor as T


def numeric_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn()
        flat[k] = orig - eps
        down = fn()
        flat[k] = orig
        g.reshape(-1)[k] = (up - down) / (2 * eps)
    return g


def check_op(build, *arrays, tol=1e-6):
    params = [T.param(a.copy()) for a in arrays]
    with T.Tape() as tape:
        loss = build(*params)
    grads = T.backward(tape, loss, params)
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: float(build(*params).data), p.data)
        assert np.allclose(g, num, atol=tol, rtol=tol), (g, num)


def test_relu_values():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_log_softmax_uniform():
    y = T.log_softmax(np.zeros((2, 5))).data
    assert np.allclose(y, -np.log(5), atol=1e-15)


def test_log_softmax_mask():
    mask = np.array([[0.0, -np.inf, 0.0]])
    y = T.log_softmax(np.array([[1.0, 5.0, 2.0]]), mask).data
    assert np.exp(y[0, 1]) == 0.0
    assert abs(np.exp(y).sum() - 1) < 1e-12


def test_segment_mean_equal_rows():
    r = np.array([[1.0, 2.0, 3.0]])
    out = T.segment_mean(np.vstack([r, r]), [0, 0], 1).data
    assert np.array_equal(out, r)


def test_sum_grad_is_ones():
    x = T.param(np.random.default_rng(0).normal(size=(3, 4)))
    with T.Tape() as tape:
        loss = T.sum(x)
    (g,) = T.backward(tape, loss, [x])
    assert np.array_equal(g, np.ones((3, 4)))


def test_relu_grad_negative():
    x = T.param(np.array([[-2.0, 3.0]]))
    with T.Tape() as tape:
        loss = T.sum(T.relu(x))
    (g,) = T.backward(tape, loss, [x])
    assert np.array_equal(g, [[0.0, 1.0]])


def test_unreachable_param_zero():
    x, y = T.param(np.ones((2, 2))), T.param(np.ones((3, 1)))
    with T.Tape() as tape:
        loss = T.sum(x * x)
    gx, gy = T.backward(tape, loss, [x, y])
    assert np.array_equal(gx, 2 * np.ones((2, 2))) and np.array_equal(gy, np.zeros((3, 1)))


def test_non_scalar_loss():
    x = T.param(np.ones((2, 2)))
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(T.ShapeError):
        T.backward(tape, y, [x])


def test_non_finite_loss():
    x = T.param(np.zeros((1, 1)))
    with T.Tape() as tape:
        y = T.sum(T.log(x))
    with pytest.raises(FloatingPointError):
        T.backward(tape, y, [x])


@pytest.mark.parametrize("build", [
    lambda a, b: T.matmul(a, b),
    lambda a, b: T.add(T.matmul(a, b), T.matmul(a, b)),
])
def test_matmul_shape_error(build):
    with pytest.raises(T.ShapeError, match="matmul"):
        build(np.ones((2, 3)), np.ones((2, 3)))


def test_add_shape_error():
    with pytest.raises(T.ShapeError, match=r"add: incompatible shapes \(2, 3\), \(3, 2\)"):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_no_general_broadcast():
    with pytest.raises(T.ShapeError):
        T.mul(np.ones((2, 3)), np.ones((1, 3)))


def test_segment_ids_out_of_range():
    with pytest.raises(T.ShapeError):
        T.Segments([0, 3], 2)


def test_segment_logsumexp_empty_segment():
    out = T.segment_logsumexp(np.array([[0.0], [1.0]]), [0, 0], 2).data
    assert out[1, 0] == -np.inf
    assert out[0, 0] == pytest.approx(np.log(1 + np.e))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_primitive_gradients(seed, n, m, k):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, m))
    b = rng.normal(size=(m, k))
    bias = rng.normal(size=(1, k))
    c = rng.normal(size=(n, k))
    ids = rng.integers(0, 3, size=n)
    idx = rng.integers(0, n, size=5)
    w = rng.normal(size=(n, m))
    v = rng.normal(size=(3, m))
    check_op(lambda x, y, z: T.sum(T.relu(T.linear(x, y, z)) * c), a, b, bias)
    check_op(lambda x: T.sum(T.exp(x) * w), a)
    check_op(lambda x: T.sum(T.log(T.exp(x) + 1.0) * w), a)
    check_op(lambda x: T.sum(T.gather(x, idx) * w[idx]), a)
    check_op(lambda x: T.sum(T.segment_sum(x, ids, 3) * v), a)
    check_op(lambda x: T.sum(T.segment_mean(x, ids, 3) * np.arange(3 * m).reshape(3, m)), a)
    check_op(lambda x: T.sum(T.log_softmax(x) * w), a)
    check_op(lambda x: T.sum(T.reshape(x, (n * m, 1)) * w.reshape(-1, 1)), a)
    other = rng.normal(size=(2, m))
    check_op(lambda x, y: T.sum(T.concat([x, -y], axis=0) * np.arange((n + 2.0) * m).reshape(-1, m)), a, other)
    # every segment non-empty so the log-sum-exp stays finite
    full = rng.permutation(np.concatenate([np.arange(3), ids]))
    col = rng.normal(size=(n + 3, 1))
    u = rng.normal(size=(n + 3, 1))
    check_op(lambda x: T.sum(T.segment_logsumexp(x, full, 3) * np.array([[1.0], [2.0], [0.5]])), col)
    check_op(lambda x: T.sum(T.segment_log_softmax(x, full, 3) * u), col)


def test_masked_log_softmax_gradient():
    mask = np.array([[0.0, -np.inf, 0.0], [-np.inf, 0.0, 0.0]])
    w = np.array([[1.0, 0.0, -2.0], [0.0, 3.0, 1.0]])
    x = np.random.default_rng(1).normal(size=(2, 3))

    def build(p):
        y = T.log_softmax(p, mask)
        return T.sum(T.exp(y) * w)

    check_op(build, x)


def test_mlp_grad_check():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    ps = [T.param(rng.normal(size=s)) for s in [(4, 5), (1, 5), (5, 5), (1, 5), (5, 1), (1, 1)]]

    def loss():
        h = T.relu(T.linear(x, ps[0], ps[1]))
        h = T.relu(T.linear(h, ps[2], ps[3]))
        return T.sum(T.linear(h, ps[4], ps[5]) * np.linspace(-1, 2, 6).reshape(6, 1))

    report = T.grad_check(loss, ps)
    assert report["passed"]
    assert all(e["max_rel_error"] < 1e-4 for e in report["params"])


def test_grad_check_identity():
    p = T.param(np.array([[0.7]]))
    with T.Tape() as tape:
        loss = T.sum(p)
    assert T.backward(tape, loss, [p])[0][0, 0] == 1.0
    report = T.grad_check(lambda: T.sum(p), [p])
    assert report["passed"] and report["params"][0]["max_rel_error"] < 1e-9


def test_grad_check_empty():
    report = T.grad_check(lambda: T.Tensor(1.0), [])
    assert report["params"] == [] and report["passed"]


def test_grad_check_detects_wrong_gradient():
    p = T.param(np.array([[0.3, -1.2]]))

    def bad():
        # value uses p**2, gradient path only sees p
        out = T.sum(p)
        out.data = np.sum(p.data ** 2)
        return out

    assert not T.grad_check(bad, [p])["passed"]


def test_grad_check_size_limit():
    p = T.param(np.zeros((100, 51)))
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum(p), [p])


def test_no_tape_no_recording():
    x = T.param(np.ones((2, 2)))
    y = x * 3.0
    assert not y.requires_grad
    with T.Tape() as tape:
        z = x * 3.0
    assert z.requires_grad and len(tape) == 1
