"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node holding its parents and one vector-Jacobian
callback per parent; ``backward`` walks the graph in reverse topological
order and accumulates into ``.grad``.  Everything is float64: the graphs
here are desk-scale and finite-difference gradient checks at 1e-5 steps need
the headroom.

Only what the pipeline uses is implemented: elementwise arithmetic with
numpy broadcasting, matmul, reductions, the pointwise nonlinearities, basic
shape surgery, im2col convolution, integer/bilinear gathers out of image
tensors (scatter-add adjoints), and straight-through rounding.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit


class DisconnectedGraph(RuntimeError):
    """Loss does not reach any of the requested parameters."""


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "_parents")

    def __init__(self, data, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents  # tuple of (Tensor, vjp callable)

    # -- bookkeeping ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar ------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, k):
        return pow_const(self, k)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    # -- reverse pass --------------------------------------------------------
    def backward(self, params=None):
        if self.size != 1:
            raise ShapeMismatch("backward needs a scalar loss")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:  # iterative DFS postorder
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                stack.append((parent, False))
        if params is not None:
            wanted = {id(p) for p in params}
            if not (wanted & seen):
                raise DisconnectedGraph("no parameter is reachable from the loss")
        self.accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node._parents:
                parent.accumulate(vjp(node.grad))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------ arithmetic ----

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data / b.data, (
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / b.data**2, b.shape)),
    ))


def pow_const(a, k: float):
    a = as_tensor(a)
    return Tensor(a.data**k, (
        (a, lambda g: g * k * a.data**(k - 1)),
    ))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch("matmul is 2D only; reshape batched operands")
    return Tensor(a.data @ b.data, (
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ))


# ------------------------------------------------------------- reductions ---

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return Tensor(out, ((a, back),))


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# -------------------------------------------------------------- pointwise ---

def abs_(a):
    a = as_tensor(a)
    return Tensor(np.abs(a.data), ((a, lambda g: g * np.sign(a.data)),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, ((a, lambda g: g * out),))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), ((a, lambda g: g / a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, ((a, lambda g: g * 0.5 / out),))


def cos(a):
    a = as_tensor(a)
    return Tensor(np.cos(a.data), ((a, lambda g: -g * np.sin(a.data)),))


def sin(a):
    a = as_tensor(a)
    return Tensor(np.sin(a.data), ((a, lambda g: g * np.cos(a.data)),))


def relu(a):
    a = as_tensor(a)
    return Tensor(np.maximum(a.data, 0.0), ((a, lambda g: g * (a.data > 0)),))


def gelu(a):
    # exact (erf) form; derivative = Phi(x) + x*phi(x)
    a = as_tensor(a)
    phi_cdf = 0.5 * (1.0 + erf(a.data / np.sqrt(2.0)))
    out = a.data * phi_cdf

    def back(g):
        pdf = np.exp(-0.5 * a.data**2) / np.sqrt(2.0 * np.pi)
        return g * (phi_cdf + a.data * pdf)

    return Tensor(out, ((a, back),))


def softplus(a):
    a = as_tensor(a)
    return Tensor(np.logaddexp(0.0, a.data), ((a, lambda g: g * expit(a.data)),))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return Tensor(out, ((a, lambda g: g * out * (1.0 - out)),))


def round_ste(a):
    """Round to integers in the forward pass, identity in the backward pass."""
    a = as_tensor(a)
    return Tensor(np.round(a.data), ((a, lambda g: g),))


# ----------------------------------------------------------- shape surgery --

def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), ((a, lambda g: g.reshape(a.shape)),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return Tensor(a.data.transpose(axes), ((a, lambda g: g.transpose(inv)),))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back_for(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  tuple((p, back_for(i)) for i, p in enumerate(parts)))


def slice_(a, key):
    a = as_tensor(a)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return out

    return Tensor(a.data[key], ((a, back),))


# ------------------------------------------------------------ convolution ---

def _col_indices(cin, h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    c_idx = np.repeat(np.arange(cin), kh * kw).reshape(-1, 1)
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    y_idx = np.tile(ky.ravel(), cin).reshape(-1, 1) + oy.ravel()
    x_idx = np.tile(kx.ravel(), cin).reshape(-1, 1) + ox.ravel()
    return c_idx, y_idx, x_idx, ho, wo


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    """x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d channels: input {cin}, weight {cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ci, yi, xi, ho, wo = _col_indices(cin, h, wd, kh, kw, stride, padding)
    cols = xp[:, ci, yi, xi]                       # (B, Cin*kh*kw, Ho*Wo)
    wm = w.data.reshape(cout, -1)
    out = np.einsum("ok,bkl->bol", wm, cols).reshape(bsz, cout, ho, wo)
    out += b.data.reshape(1, cout, 1, 1)

    def back_x(g):
        gcols = np.einsum("ok,bol->bkl", wm, g.reshape(bsz, cout, -1))
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), ci, yi, xi), gcols)
        return gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp

    def back_w(g):
        gw = np.einsum("bol,bkl->ok", g.reshape(bsz, cout, -1), cols)
        return gw.reshape(w.shape)

    return Tensor(out, (
        (x, back_x),
        (w, back_w),
        (b, lambda g: g.sum(axis=(0, 2, 3))),
    ))


# ---------------------------------------------------------------- gathers ---

def _wrap_clamp(iy, ix, h, w, wrap_x):
    iy = np.clip(iy, 0, h - 1)
    ix = np.mod(ix, w) if wrap_x else np.clip(ix, 0, w - 1)
    return iy, ix


def gather2d(t, iy, ix, wrap_x: bool = True):
    """Integer gather from (C, H, W) at n positions -> (C, n)."""
    t = as_tensor(t)
    c, h, w = t.shape
    iy, ix = _wrap_clamp(np.asarray(iy), np.asarray(ix), h, w, wrap_x)

    def back(g):
        out = np.zeros(t.shape)
        np.add.at(out, (slice(None), iy, ix), g)
        return out

    return Tensor(t.data[:, iy, ix], ((t, back),))


def bilinear_gather(t, fy, fx, wrap_x: bool = True):
    """Bilinear read from (C, H, W) at continuous (row, col) positions -> (C, n).

    Coordinates are data, not differentiated; the adjoint scatters the four
    corner weights back into the image.
    """
    t = as_tensor(t)
    c, h, w = t.shape
    fy = np.asarray(fy, dtype=np.float64)
    fx = np.asarray(fx, dtype=np.float64)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    wy, wx = fy - y0, fx - x0
    corners, weights = [], []
    for dy, wy_ in ((0, 1.0 - wy), (1, wy)):
        for dx, wx_ in ((0, 1.0 - wx), (1, wx)):
            iy, ix = _wrap_clamp(y0 + dy, x0 + dx, h, w, wrap_x)
            corners.append((iy, ix))
            weights.append(wy_ * wx_)
    out = sum(wgt * t.data[:, iy, ix] for (iy, ix), wgt in zip(corners, weights))

    def back(g):
        acc = np.zeros(t.shape)
        for (iy, ix), wgt in zip(corners, weights):
            np.add.at(acc, (slice(None), iy, ix), g * wgt)
        return acc

    return Tensor(out, ((t, back),))
