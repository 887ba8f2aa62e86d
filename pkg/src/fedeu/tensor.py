"""Minimal reverse-mode autodiff over dense numpy arrays.

Forward is eager. Each differentiable op records a ``_Node`` holding its
parents and a closure that maps the output gradient to parent gradients.
``backward`` linearises the graph into a :class:`GradTape`, replays it in
reverse once, and then marks every node consumed so a second pass over the
same graph raises instead of silently double-counting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError, TapeConsumedError

DEFAULT_DTYPE = np.float32


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        # ndarrays keep float32/float64 (float64 probes for gradient checks);
        # everything else lands in the default float32
        if isinstance(data, (np.ndarray, np.floating)) and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op, out):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output in op '{op}'")


def _make(op, out, parents, backward_fn):
    _check_finite(op, out)
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, parents, backward_fn)
    return t


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def _binary(op, a, b, fwd, grads):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    with np.errstate(all="ignore"):  # non-finite results are reported by _make
        out = fwd(a.data, b.data)

    def backward_fn(g):
        ga, gb = grads(g, a.data, b.data, out)
        return (
            _unbroadcast(ga, a.shape) if a.requires_grad else None,
            _unbroadcast(gb, b.shape) if b.requires_grad else None,
        )

    return _make(op, out, (a, b), backward_fn)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    return _binary("div", a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y))


def _unary(op, x, fwd, dfdx):
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        out = fwd(x.data)

    def backward_fn(g):
        return (g * dfdx(x.data, out),)

    return _make(op, out, (x,), backward_fn)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0),
                  lambda v, o: (v > 0).astype(v.dtype))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda v, o: o * (1 - o))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda v, o: 1 - o * o)


def exp(x):
    return _unary("exp", x, np.exp, lambda v, o: o)


def softplus(x):
    return _unary("softplus", x, lambda v: np.logaddexp(0, v), lambda v, o: _sigmoid(v))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary("log", x, np.log, lambda v, o: 1 / v)


def lgamma(x):
    return _unary("lgamma", x,
                  lambda v: kernels.lgamma(v).astype(v.dtype),
                  lambda v, o: kernels.digamma(v).astype(v.dtype))


def digamma(x):
    return _unary("digamma", x,
                  lambda v: kernels.digamma(v).astype(v.dtype),
                  lambda v, o: kernels.trigamma(v).astype(v.dtype))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp,
          "softplus": softplus, "log": log, "lgamma": lgamma, "digamma": digamma}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Apply a named elementwise op; ``b`` is required for binary kinds."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# shape and reduction


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make("transpose", out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors))

    return _make("concat", out, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(all="ignore"):
        out = a.data @ b.data

    def backward_fn(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make("matmul", out, (a, b), backward_fn)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, (C_out, C_in, kh, kw) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, kcin, kh, kw = w.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape}")
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    # patch matrix is channel-major: (C_in*kh*kw, B*Ho*Wo)
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, -1)
    with np.errstate(all="ignore"):
        out = wmat @ cols
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out += b.data[:, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3))
    keep_cols = cols if w.requires_grad else None

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = wmat.T @ g2
            if pointwise:
                gx = np.ascontiguousarray(gcols.reshape(cin, bsz, h, wd).transpose(1, 0, 2, 3))
            else:
                gx = kernels.col2im(gcols, x.shape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = (g2 @ keep_cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make("conv2d", out, parents, backward_fn)


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [B,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make("global_avg_pool", out, (x,), backward_fn)


def instance_norm(x, eps=1e-5):
    """Normalise each row of a [B, F] tensor to zero mean, unit variance."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"instance_norm: expected [B, F>=2], got {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    out = centered * inv_std

    def backward_fn(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * out).mean(axis=1, keepdims=True)
        return (inv_std * (g - gm - out * gy),)

    return _make("instance_norm", out, (x,), backward_fn)


def upsample_nearest(x, factor):
    x = as_tensor(x)
    if factor not in (1, 2, 4):
        raise ShapeError(f"upsample_nearest: factor must be 1, 2 or 4, got {factor}")
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward_fn(g):
        return (kernels.upsample_backward(g, factor),)

    return _make("upsample_nearest", out, (x,), backward_fn)


def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy of sigmoid(logits) against target."""
    logits, target = as_tensor(logits), as_tensor(target, like=logits)
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs {target.shape}")
    z, y = logits.data, target.data
    out = np.logaddexp(0, z) - y * z

    def backward_fn(g):
        return (g * (_sigmoid(z) - y) if logits.requires_grad else None,
                g * -z if target.requires_grad else None)

    return _make("bce_with_logits", out, (logits, target), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


class GradTape:
    """Topologically ordered record of the ops reachable from a root."""

    def __init__(self, root):
        self.entries = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                self.entries.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self):
        return len(self.entries)

    def replay(self, root, seed):
        grads = {id(root): seed}
        for t in reversed(self.entries):
            node = t._node
            if node.consumed:
                raise TapeConsumedError(f"op '{node.op}' was already consumed by a backward pass")
            g = grads.pop(id(t), None)
            if g is None:
                node.consumed = True
                node.backward_fn = None
                continue
            parent_grads = node.backward_fn(g)
            node.consumed = True
            node.backward_fn = None
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate(p, pg)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def _accumulate(leaf, g):
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(root):
    """Fill ``.grad`` on every leaf that ``root`` depends on."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones(root.shape, dtype=root.data.dtype)
    if root._node is None:
        if root.requires_grad:
            _accumulate(root, seed)
        return
    if root._node.consumed:
        raise TapeConsumedError("backward called twice on the same graph")
    GradTape(root).replay(root, seed)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def finite_diff_check(f, x, step=1e-3, tol=1e-3, dtype=np.float64, atol=1e-6):
    """Compare autodiff and central-difference gradients of scalar ``f`` at ``x``.

    The probe point is cast to ``dtype`` (float64 by default) so that the
    comparison measures the backward formulas rather than float32 rounding.
    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    probe = Tensor(x0.copy(), requires_grad=True)
    backward(f(probe))
    analytic = np.zeros_like(x0) if probe.grad is None else probe.grad.astype(dtype)
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp.flat[i] += step
        fp = f(Tensor(xp)).item()
        xp.flat[i] -= 2 * step
        fm = f(Tensor(xp)).item()
        numeric.flat[i] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return FiniteDiffReport(err, tol, analytic, numeric)
