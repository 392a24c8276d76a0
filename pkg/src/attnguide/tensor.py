"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every op returns a new Tensor holding a closure
that routes the output gradient to its parents. ``backward()`` on a scalar
walks the graph once in reverse topological order. Calling ``backward()``
twice without ``zero_grad`` accumulates gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph walking ----------------------------------------------------

    def _toposort(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = self._toposort()
        # Run each pass on clean gradients, then fold the previous ones back
        # in, so calling backward() twice accumulates instead of compounding.
        stash = [node.grad for node in order]
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        for node, prev in zip(order, stash):
            if prev is not None:
                node.grad = prev if node.grad is None else node.grad + prev

    def zero_grad(self):
        for node in self._toposort():
            node.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def _accum(t, g):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data, parents, backward_fn):
    needs = any(p.requires_grad or p._parents for p in parents)
    return Tensor(data, _parents=tuple(parents) if needs else (),
                  _backward_fn=backward_fn if needs else None)


def _as_const(x, like_shape):
    """Coerce a python number / ndarray operand to a broadcast-safe array."""
    arr = np.asarray(x, dtype=np.float32)
    if np.broadcast_shapes(arr.shape, like_shape) != tuple(like_shape):
        raise ShapeError(
            f"constant operand {arr.shape} does not broadcast within {like_shape}"
        )
    return arr


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        c = _as_const(b, a.data.shape)
        return _result(a.data + c, (a,), lambda g, a=a: _accum(a, g))
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g, a=a, b=b: (_accum(a, g), _accum(b, g)))


def sub(a, b):
    if not isinstance(b, Tensor):
        c = _as_const(b, a.data.shape)
        return _result(a.data - c, (a,), lambda g, a=a: _accum(a, g))
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g, a=a, b=b: (_accum(a, g), _accum(b, -g)))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = _as_const(b, a.data.shape)
        return _result(a.data * c, (a,), lambda g, a=a, c=c: _accum(a, g * c))
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g, a=a, b=b: (_accum(a, g * b.data),
                                        _accum(b, g * a.data)))


def div(a, b):
    if not isinstance(b, Tensor):
        c = _as_const(b, a.data.shape)
        return _result(a.data / c, (a,), lambda g, a=a, c=c: _accum(a, g / c))
    _check_same_shape(a, b, "div")

    def bw(g, a=a, b=b):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _result(a.data / b.data, (a, b), bw)


def relu(a):
    mask = a.data > 0

    def bw(g, a=a, mask=mask):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


def log(a, eps=1e-12):
    clipped = np.maximum(a.data, eps)

    def bw(g, a=a, clipped=clipped):
        _accum(a, g / clipped)

    return _result(np.log(clipped), (a,), bw)


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g, a=a, out=out):
        _accum(a, g / (2.0 * np.maximum(out, 1e-12)))

    return _result(out, (a,), bw)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g, a=a, out=out):
        _accum(a, g * out * (1.0 - out))

    return _result(out, (a,), bw)


# -- reductions & shaping ----------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    old = a.data.shape

    def bw(g, a=a, old=old):
        _accum(a, g.reshape(old))

    return _result(a.data.reshape(shape), (a,), bw)


def take(a, idx):
    """Basic (integer / slice / tuple) indexing with scatter-add backward."""
    out = a.data[idx]

    def bw(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _result(out, (a,), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got "
                         f"{a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


# -- neural-net ops -----------------------------------------------------------

def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of NCHW input with FCkHkW kernel (im2col + GEMM)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got "
                         f"{x.data.shape} and {kernel.data.shape}")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} "
                         f"vs kernel {kernel.data.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >=1 and padding >=0")
    ho, rh = divmod(h + 2 * padding - kh, stride)
    wo, rw = divmod(w + 2 * padding - kw, stride)
    ho, wo = ho + 1, wo + 1
    if rh or rw or ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: input {x.data.shape} with kernel {kernel.data.shape}, "
            f"stride {stride}, padding {padding} gives no integral output size")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    kflat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kflat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g, x=x, kernel=kernel, cols=cols, kflat=kflat):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if kernel.requires_grad or kernel._parents:
            _accum(kernel, (gmat.T @ cols).reshape(kernel.data.shape))
        if x.requires_grad or x._parents:
            dcols = (gmat @ kflat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, :, :, i, j]\
                        .transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            _accum(x, dxp)

    return _result(np.ascontiguousarray(out), (x, kernel), bw)


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; ties go to the first (row-major) cell."""
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g, x=x, arg=arg):
        dwin = np.zeros((n, c, ho, wo, size * size), dtype=np.float32)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, dx.reshape(n, c, h, w))

    return _result(out, (x,), bw)


def global_avg_pool(x):
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float32)

    def bw(g, x=x):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _result(out, (x,), bw)


def dense(x, weight, bias):
    """Affine map: x @ weight + bias. Bias-add is the one allowed broadcast."""
    out = matmul(x, weight)
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"dense bias {bias.data.shape} vs out dim "
                         f"{weight.data.shape[1]}")

    def bw(g, out=out, bias=bias):
        _accum(out, g)
        _accum(bias, g.sum(axis=0))

    return _result(out.data + bias.data[None, :], (out, bias), bw)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, x=x, out=out, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _result(out, (x,), bw)


def binary_cross_entropy(pred, target, eps=1e-7):
    """Mean BCE between predicted probabilities and a constant target array."""
    t = _as_const(target, pred.data.shape)
    p = np.clip(pred.data, eps, 1.0 - eps)
    out = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean(dtype=np.float32)

    def bw(g, pred=pred, t=t, p=p):
        _accum(pred, g * (p - t) / (p * (1.0 - p)) / p.size)

    return _result(np.float32(out), (pred,), bw)


# -- training utilities -------------------------------------------------------

def sgd_step(params, lr, weight_decay=0.0):
    """In-place SGD update; lr == 0 leaves parameters bit-identical."""
    if lr == 0.0:
        return
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.data = (p.data - np.float32(lr) * g).astype(np.float32)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most max_norm.

    Returns the norm measured before clipping.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def check_finite(t, context=""):
    if not np.all(np.isfinite(t.data)):
        raise ContractError(f"non-finite values in tensor {context or t!r}")


def grad_check(f, point, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    The numeric side accumulates in float64. Returns +inf if either side
    produces a NaN.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None \
        else x.grad.astype(np.float64)

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            flat[i] = np.float32(orig + sign * eps)
            val = float(f(Tensor(x.data.copy())).data)
            numeric[i] += sign * val
        flat[i] = orig
    numeric /= (2.0 * eps)

    a = analytic.reshape(-1)
    if np.isnan(a).any() or np.isnan(numeric).any():
        return float("inf")
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0
