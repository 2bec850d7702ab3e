"""A small reverse-mode differentiation engine over float64 numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order. Feature maps use the ``(N, C, H, W)``
layout throughout.
"""

from __future__ import annotations

import numpy as np

from ..geometry import sample_rows, sample_rows_backward
from ..imgproc import _sample_axis

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "add", "sub", "mul", "neg", "scale", "abs_", "relu", "leaky_relu",
    "sigmoid", "softplus", "log", "clip", "sum_", "mean", "concat",
    "conv2d", "conv_transpose2d", "upsample2x", "corr1d", "warp",
]

LEAKY_SLOPE = 0.1

# when a list, piecewise ops append the sign pattern of their input (see gradcheck)
_KINK_LOG: list | None = None


def _log_kinks(*masks):
    if _KINK_LOG is not None:
        for m in masks:
            _KINK_LOG.append(np.packbits(m))


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit seed needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    _log_kinks(a.data > 0)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    _log_kinks(pos)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    _log_kinks(a.data > 0)
    k = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * s,))


def softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    _log_kinks(a.data >= lo, a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(a.data[idx], (a,), back)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / n)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _gather(xp, k, s, ho, wo):
    """Columns ``(N, C*k*k, ho*wo)`` of a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * k * k, ho * wo)


def _scatter(cols, shape, k, s, h, w):
    """Adjoint of :func:`_gather`: accumulate columns into a zero array of ``shape``."""
    n, c = shape[:2]
    cols = cols.reshape(n, c, k, k, h, w)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * h:s, j:j + s * w:s] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of ``x (N,C,H,W)`` with ``w (O,C,k,k)``, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    s, p = stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="input smaller than kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = _gather(xp, k, s, ho, wo)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d bias", b.shape, (o,))
        out += b.data[:, None]
        parents.append(b)
    out = out.reshape(n, o, ho, wo)

    def back(g):
        go = g.reshape(n, o, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, go)
            gx = _scatter(dcols, xp.shape, k, s, ho, wo)[:, :, p:p + h, p:p + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(go.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, parents, back)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; ``w`` is ``(C_in, C_out, k, k)``.

    With ``k=4, stride=2, padding=1`` the spatial size exactly doubles.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    s, p = stride, padding
    hf, wf = (h - 1) * s + k, (wd - 1) * s + k
    ho, wo = hf - 2 * p, wf - 2 * p
    xf = x.data.reshape(n, ci, h * wd)
    wmat = w.data.reshape(ci, co * k * k)
    cols = np.matmul(wmat.T, xf)
    full = _scatter(cols, (n, co, hf, wf), k, s, h, wd)
    out = np.ascontiguousarray(full[:, :, p:p + ho, p:p + wo])
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError("conv_transpose2d bias", b.shape, (co,))
        out += b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gfull = np.zeros((n, co, hf, wf))
        gfull[:, :, p:p + ho, p:p + wo] = g
        dcols = _gather(gfull, k, s, h, wd)
        gx = np.matmul(wmat, dcols).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(xf, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, back)


_UP_CACHE: dict[int, np.ndarray] = {}


def _up_matrix(n: int) -> np.ndarray:
    if n not in _UP_CACHE:
        i0, i1, f = _sample_axis(n, 2 * n)
        a = np.zeros((2 * n, n))
        rows = np.arange(2 * n)
        np.add.at(a, (rows, i0), 1.0 - f)
        np.add.at(a, (rows, i1), f)
        _UP_CACHE[n] = a
    return _UP_CACHE[n]


def upsample2x(x) -> Tensor:
    """Bilinear x2 upsampling (half-pixel centres, edge clamp) as a linear map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample2x", x.shape)
    ah = _up_matrix(x.shape[2])
    aw = _up_matrix(x.shape[3])
    out = ah @ x.data @ aw.T
    return _make(out, (x,), lambda g: (ah.T @ g @ aw,))


# ---------------------------------------------------------------------------
# stereo-specific
# ---------------------------------------------------------------------------

def corr1d(left, right, max_disp: int) -> Tensor:
    """Horizontal correlation volume with ``max_disp + 1`` channels.

    ``out[:, d, i, j] = mean_c left[:, c, i, j] * right[:, c, i, j - d]``;
    samples with ``j - d < 0`` contribute zero.
    """
    left, right = as_tensor(left), as_tensor(right)
    if left.shape != right.shape or left.ndim != 4:
        raise ShapeError("corr1d", left.shape, right.shape)
    n, c, h, w = left.shape
    if not 0 <= max_disp < w:
        raise ShapeError("corr1d", left.shape, detail=f"max_disp={max_disp} must be < width={w}")
    L, R = left.data, right.data
    out = np.zeros((n, max_disp + 1, h, w))
    for d in range(max_disp + 1):
        out[:, d, :, d:] = np.einsum("nchw,nchw->nhw", L[..., d:], R[..., :w - d]) / c

    def back(g):
        gl = np.zeros_like(L) if left.requires_grad else None
        gr = np.zeros_like(R) if right.requires_grad else None
        for d in range(max_disp + 1):
            gd = g[:, d:d + 1, :, d:] / c
            if gl is not None:
                gl[..., d:] += gd * R[..., :w - d]
            if gr is not None:
                gr[..., :w - d] += gd * L[..., d:]
        return gl, gr

    return _make(out, (left, right), back)


def warp(img, disp) -> Tensor:
    """Differentiable horizontal backward warp: sample ``img`` at ``j - disp``."""
    img, disp = as_tensor(img), as_tensor(disp)
    if img.ndim != 4 or disp.ndim != 4 or disp.shape[1] != 1 or (
        img.shape[0], img.shape[2:]) != (disp.shape[0], disp.shape[2:]):
        raise ShapeError("warp", img.shape, disp.shape)
    out = sample_rows(img.data, disp.data)
    return _make(out, (img, disp), lambda g: sample_rows_backward(g, img.data, disp.data))
