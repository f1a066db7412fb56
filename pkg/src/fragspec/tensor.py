"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. ``backward`` walks the tape in reverse, so every
recorded op is visited exactly once.
"""

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


_active = []


class Tape:
    def __init__(self):
        self.ops = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()

    def __len__(self):
        return len(self.ops)

    def backward(self, loss, params):
        return backward(self, loss, params)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def const(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def _record(out, inputs, grad_fn):
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].ops.append((out, inputs, grad_fn))
    return out


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# ------------------------------------------------------------------ primitives

def matmul(a, b):
    a, b = const(a), const(b)
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a, b):
    """Elementwise sum; ``b`` may be a row vector broadcast over rows of ``a``."""
    a, b = const(a), const(b)
    if a.shape == b.shape:
        return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))
    if b.data.ndim == 2 and b.shape[0] == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[1]:
        return _record(Tensor(a.data + b.data), (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True)))
    if b.data.ndim == 0 or b.data.size == 1:
        return _record(Tensor(a.data + b.data.reshape(())), (a, b),
                       lambda g: (g, np.reshape(g.sum(), b.shape)))
    _check(False, "add", a.shape, b.shape)


def mul(a, b):
    """Elementwise product of equal shapes, or scaling by a constant scalar."""
    a, b = const(a), const(b)
    if a.shape == b.shape:
        return _record(Tensor(a.data * b.data), (a, b),
                       lambda g: (g * b.data, g * a.data))
    if b.data.size == 1 and not b.requires_grad:
        s = float(b.data.reshape(()))
        return _record(Tensor(a.data * s), (a, b), lambda g: (g * s, None))
    if a.data.size == 1 and not a.requires_grad:
        return mul(b, a)
    _check(False, "mul", a.shape, b.shape)


def neg(a):
    a = const(a)
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def relu(a):
    a = const(a)
    on = a.data > 0
    return _record(Tensor(np.where(on, a.data, 0.0)), (a,), lambda g: (g * on,))


def exp(a):
    a = const(a)
    y = np.exp(a.data)
    return _record(Tensor(y), (a,), lambda g: (g * y,))


def log(a):
    a = const(a)
    with np.errstate(divide="ignore"):
        y = np.log(a.data)
    return _record(Tensor(y), (a,), lambda g: (g / a.data,))


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = const(a)
    return _record(Tensor(np.sum(a.data)), (a,), lambda g: (np.full(a.shape, float(g)),))


def reshape(a, shape):
    a = const(a)
    return _record(Tensor(a.data.reshape(shape)), (a,), lambda g: (g.reshape(a.shape),))


def gather(a, index):
    """Rows ``a[index]``."""
    a = const(a)
    index = np.asarray(index, dtype=np.int64)
    _check(index.size == 0 or (index.min() >= 0 and index.max() < a.shape[0]),
           "gather", a.shape, f"index range [{index.min() if index.size else 0}, "
                               f"{index.max() if index.size else 0}]")

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(Tensor(a.data[index]), (a,), grad)


def concat(tensors, axis=1):
    tensors = [const(t) for t in tensors]
    other = 1 - axis
    _check(all(t.data.ndim == 2 for t in tensors)
           and len({t.shape[other] for t in tensors}) == 1,
           "concat", *[t.shape for t in tensors])
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


class Segments:
    """Row -> segment assignment with a cached sparse summation matrix."""

    def __init__(self, ids, n):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.n = int(n)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise ShapeError(f"segment ids out of range for {self.n} segments")
        self.counts = np.bincount(self.ids, minlength=self.n).astype(np.float64)
        self.matrix = sp.csr_matrix(
            (np.ones(self.ids.size), (self.ids, np.arange(self.ids.size))),
            shape=(self.n, self.ids.size))

    def __len__(self):
        return self.ids.size


def _segments(seg, n=None):
    return seg if isinstance(seg, Segments) else Segments(seg, n)


def segment_sum(a, seg, n=None):
    a, seg = const(a), _segments(seg, n)
    _check(a.data.ndim == 2 and a.shape[0] == len(seg), "segment_sum", a.shape, (len(seg),))
    out = Tensor(np.asarray(seg.matrix @ a.data))
    return _record(out, (a,), lambda g: (g[seg.ids],))


def segment_mean(a, seg, n=None):
    a, seg = const(a), _segments(seg, n)
    _check(a.data.ndim == 2 and a.shape[0] == len(seg), "segment_mean", a.shape, (len(seg),))
    inv = 1.0 / np.maximum(seg.counts, 1.0)
    out = Tensor(np.asarray(seg.matrix @ a.data) * inv[:, None])
    return _record(out, (a,), lambda g: ((g * inv[:, None])[seg.ids],))


def segment_logsumexp(a, seg, n=None):
    """Per-segment log-sum-exp of a column vector (rows x 1); empty segments give -inf."""
    a, seg = const(a), _segments(seg, n)
    _check(a.data.ndim == 2 and a.shape[1] == 1 and a.shape[0] == len(seg),
           "segment_logsumexp", a.shape, (len(seg),))
    x = a.data[:, 0]
    m = np.full(seg.n, -np.inf)
    np.maximum.at(m, seg.ids, x)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.asarray(seg.matrix @ np.exp(x - shift[seg.ids]))
        out = np.log(s) + shift
    weights = np.exp(x - np.where(np.isfinite(out), out, 0.0)[seg.ids])
    weights[~np.isfinite(x)] = 0.0
    return _record(Tensor(out[:, None]), (a,), lambda g: ((g[seg.ids, 0] * weights)[:, None],))


def log_softmax(a, mask=None):
    """Row-wise log-softmax; ``mask`` is added first (0 or -inf per entry)."""
    a = const(a)
    _check(a.data.ndim == 2, "log_softmax", a.shape)
    x = a.data if mask is None else a.data + mask
    m = x.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    y = x - lse
    p = np.exp(y)

    def grad(g):
        g = np.where(np.isfinite(y), g, 0.0)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record(Tensor(y), (a,), grad)


# ------------------------------------------------------------- composites

def segment_log_softmax(a, seg, n=None):
    """Log-softmax of a column vector within each segment."""
    seg = _segments(seg, n)
    lse = segment_logsumexp(a, seg)
    return a - gather(lse, seg.ids)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------- backward

def backward(tape, loss, params):
    """Gradients of scalar ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("backward: loss is not finite")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, grad_fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


# ---------------------------------------------------------------- grad check

def grad_check(model_fn, params, tolerance=1e-4, step=1e-4):
    """Compare tape gradients with central finite differences.

    ``model_fn()`` must rebuild the scalar loss from the current values of
    ``params``. Returns a report dict with one entry per parameter holding the
    worst entrywise relative error and a tensor-level error
    ``max|a - n| / (max|a| + max|n| + 1e-12)``; a parameter passes when the
    tensor-level error is below ``tolerance``.
    """
    total = int(np.sum([p.data.size for p in params])) if params else 0
    if total > 5000:
        raise ValueError(f"grad_check limited to 5000 parameters, got {total}")
    with Tape() as tape:
        loss = model_fn()
    analytic = backward(tape, loss, params)
    entries = []
    for p, ga in zip(params, analytic):
        gn = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(model_fn().data)
            flat[k] = orig - step
            down = float(model_fn().data)
            flat[k] = orig
            gn.reshape(-1)[k] = (up - down) / (2 * step)
        diff = np.abs(ga - gn)
        entry_err = diff / (np.abs(ga) + np.abs(gn) + 1e-12)
        tensor_err = float(diff.max() / (np.abs(ga).max() + np.abs(gn).max() + 1e-12)) if diff.size else 0.0
        entries.append({
            "name": p.name,
            "size": int(p.data.size),
            "max_rel_error": tensor_err,
            "max_entry_rel_error": float(entry_err.max()) if entry_err.size else 0.0,
            "passed": tensor_err < tolerance,
        })
    return {
        "tolerance": tolerance,
        "params": entries,
        "passed": all(e["passed"] for e in entries),
    }
