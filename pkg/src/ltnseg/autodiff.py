"""Dense reverse-mode automatic differentiation on top of numpy.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the output records its parents and a closure mapping
the output gradient to one gradient per parent. :meth:`Tensor.backward`
walks that graph once in reverse topological order and then frees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops graph recording inside its block."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def _make(data, parents, grad_fn, op):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), grad_fn, "div")


def maximum(a, b):
    """Elementwise max; ties send the whole gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("maximum", a, b)
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                 "maximum")


# -- elementwise unary -------------------------------------------------

def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log: negative input")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent.

    Where the base is 0 and the exponent is below 1 the derivative is
    unbounded; we use 0 there.
    """
    a = as_tensor(a)
    e = float(exponent)
    if not e.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {e}")
    out = a.data ** e

    def grad_fn(g):
        if e == 0:
            return (np.zeros_like(g),)
        if e < 1:
            base = a.data
            safe = np.where(base == 0, 1.0, base)
            d = np.where(base == 0, 0.0, e * safe ** (e - 1))
        else:
            d = e * a.data ** (e - 1)
        return (g * d,)

    return _make(out, (a,), grad_fn, "power")


def sqrt(a):
    return power(a, 0.5)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, lo=0.0):
    """``max(a, lo)``; the derivative is 0 at the boundary."""
    a = as_tensor(a)
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def abs_(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


# -- shape ops ---------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    fancy = _is_fancy(index)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), grad_fn, "getitem")


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), grad_fn, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *(t.shape for t in tensors))
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn, "stack")


# -- reductions --------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims).copy(),), "sum")


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[i] for i in axes]))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    n = _count(shape, axis)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / n,), "mean")


def pmean(a, p, axis=None, keepdims=False):
    """Power mean ``(mean(a**p))**(1/p)`` of non-negative values."""
    a = as_tensor(a)
    p = float(p)
    if p < 1:
        raise ValueError(f"pmean: p must be >= 1, got {p}")
    if np.any(a.data < 0):
        raise DomainError("pmean: negative input")
    shape = a.shape
    n = _count(shape, axis)
    m = np.mean(a.data ** p, axis=axis, keepdims=True)
    out = m ** (1.0 / p)

    def grad_fn(g):
        g = g if keepdims or axis is None else np.expand_dims(g, axis)
        g = np.reshape(g, out.shape) if axis is None else g
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(m > 0, out ** (1.0 - p), 0.0)
        return (g * scale * a.data ** (p - 1) / n,)

    result = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
    return _make(result, (a,), grad_fn, "pmean")


def softmax(a, axis=0):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


# -- convolutions ------------------------------------------------------
# Channels-last layout: activations (N, H, W, C), kernels (kh, kw, Cin, Cout).
# Each kernel offset contributes one matmul over the channel axis.

def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, H, W, Cin) with ``w`` (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    s, pad = stride, padding
    ho = (h + 2 * pad - kh) // s + 1
    wo = (wd + 2 * pad - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    wk = w.data
    out = np.zeros((n, ho, wo, o))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + s * ho:s, j:j + s * wo:s, :] @ wk[i, j]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", w.shape, b.shape)
        out += b.data
        parents = (x, w, b)

    def grad_fn(g):
        g2 = g.reshape(-1, o)
        gw = np.empty_like(wk)
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :].reshape(-1, c).T @ g2
        if s == 1:
            # stride 1: the input gradient is a correlation with the flipped kernel
            ph, pw = kh - 1 - pad, kw - 1 - pad
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gx = np.zeros((n, h, wd, c))
            for i in range(kh):
                for j in range(kw):
                    r, q = kh - 1 - i, kw - 1 - j
                    gx += gp[:, r:r + h, q:q + wd, :] @ wk[i, j].T
        else:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += g @ wk[i, j].T
            gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _make(out, parents, grad_fn, "conv2d")


def conv_transpose2d(x, w, b=None, stride=2):
    """Transposed convolution of ``x`` (N, H, W, Cin) with ``w`` (kh, kw, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    s = stride
    ho, wo = (h - 1) * s + kh, (wd - 1) * s + kw
    wk = w.data
    out = np.zeros((n, ho, wo, o))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + s * h:s, j:j + s * wd:s, :] += x.data @ wk[i, j]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv_transpose2d", w.shape, b.shape)
        out += b.data
        parents = (x, w, b)
    x2 = x.data.reshape(-1, c)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(wk)
        for i in range(kh):
            for j in range(kw):
                gs = g[:, i:i + s * h:s, j:j + s * wd:s, :]
                gx += gs @ wk[i, j].T
                gw[i, j] = x2.T @ gs.reshape(-1, o)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 1, 2)),)
        return grads

    return _make(out, parents, grad_fn, "conv_transpose2d")


# -- backward ----------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root):
    """Populate ``.grad`` on every tensor reachable from a scalar ``root``.

    Leaf gradients accumulate across calls; the graph is released afterwards.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not require grad")
    order = _topological(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


# -- finite-difference checking ----------------------------------------

class ProbeError(RuntimeError):
    def __init__(self, index, value):
        self.index = index
        super().__init__(f"non-finite function value {value} at probe coordinate {index}")


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    tol: float
    skipped: bool = False
    reason: str = ""
    max_error: float = field(init=False)

    def __post_init__(self):
        self.max_error = float(self.errors.max()) if self.errors.size else 0.0

    @property
    def passed(self):
        return self.skipped or self.max_error < self.tol


def gradient_check(f, x, h=1e-5, tol=1e-4, kink=None, atol=1e-8):
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``kink`` is an optional predicate on the input array; when it returns
    true the point is non-differentiable and the check is skipped.
    The per-coordinate error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if kink is not None and kink(x0):
        empty = np.zeros(0)
        return GradCheckReport(empty, empty, empty, tol, skipped=True, reason="non-differentiable point")
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            v = f(Tensor(probe.reshape(x0.shape))).item()
            if not np.isfinite(v):
                raise ProbeError(i, v)
            vals.append(v)
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    errors = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, errors, tol)
