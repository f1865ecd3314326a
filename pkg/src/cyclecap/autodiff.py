"""Small reverse-mode differentiation engine over numpy arrays.

Every trainable computation in the package is expressed with the ops in this
module.  A graph is built dynamically while the forward pass runs; calling
:func:`backward` on a scalar orders the reachable nodes into a :class:`Tape`
and propagates gradients to every leaf with ``requires_grad``.

Arrays follow the NCHW layout for images.  Precision is controlled by
:func:`set_default_dtype` / :func:`precision`: float64 for gradient checks,
float32 for training.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "constant", "backward", "grad_check",
    "no_grad", "precision", "set_default_dtype", "get_default_dtype", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "pow", "matmul", "conv2d", "conv2d_transpose",
    "max_pool", "mean", "sum", "concat", "stack", "reshape", "transpose", "slice",
    "take_rows", "relu", "leaky_relu", "sigmoid", "tanh", "exp", "log", "abs", "clip",
    "softmax", "log_softmax",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


_local = threading.local()


def _state():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
    return _local


def get_default_dtype() -> np.dtype:
    return _state().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _state().dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point precision."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    st = _state()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    return Tensor(data, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- tape

class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Parents always precede their children in :attr:`nodes`.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._order(root)

    @staticmethod
    def _order(root: Tensor) -> list:
        order: list = []
        seen: set = set()
        stack = [(root, False)]
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
        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed_grad: np.ndarray) -> None:
        grads = {id(self.root): seed_grad}
        owned: set = set()  # ids whose buffer this loop allocated and may update in place
        for node in reversed(self.nodes):
            key = id(node)
            g = grads.pop(key, None)
            if g is None:
                continue
            owned.discard(key)
            if isinstance(g, _SliceGrad):
                g = g.dense()
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pk = id(p)
                cur = grads.get(pk)
                if cur is None:
                    grads[pk] = pg
                    continue
                if isinstance(cur, _SliceGrad):
                    cur = cur.dense()
                elif pk not in owned:
                    cur = cur.copy()
                if isinstance(pg, _SliceGrad):
                    cur[pg.index] += pg.grad
                else:
                    cur += pg
                grads[pk] = cur
                owned.add(pk)


class _SliceGrad:
    """Gradient that is zero outside a basic-indexing region."""

    __slots__ = ("shape", "index", "grad")

    def __init__(self, shape, index, grad):
        self.shape, self.index, self.grad = shape, index, grad

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape, dtype=self.grad.dtype)
        full[self.index] = self.grad
        return full


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, builtins.slice)) for i in items)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape(loss)
    tape = Tape(loss)
    tape.run(np.ones_like(loss.data))
    return tape


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               indices: Iterable | None = None) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` to central differences.

    ``x`` is perturbed in place and restored, so ``f`` may also ignore its
    argument and read ``x`` through a closure (useful for layer parameters).
    Returns ``max |analytic - numeric| / max(|numeric|, 1e-8)`` over the
    checked elements (all of them unless ``indices`` is given).
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f(x).data)
            flat[i] = orig - eps
            minus = float(f(x).data)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            err = np.abs(analytic.reshape(-1)[i] - numeric) / max(np.abs(numeric), 1e-8)
            worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb
    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb
    return _node(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _node(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _node(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------- reductions & shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)
    return _node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def slice(a: Tensor, index) -> Tensor:
    shape = a.shape

    if _is_basic(index):
        def bw(g):
            return (_SliceGrad(shape, index, g),)
    else:
        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)
    return _node(a.data[index], (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} do not conform")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        parts.append(reshape(t, tuple(shape)))
    return concat(parts, axis=axis)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather ``table[ids]`` (embedding lookup) with scatter-add backward."""
    ids = np.asarray(ids)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)
    return _node(table.data[ids], (table,), bw, "take_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _node(ad @ bd, (a, b), bw, "matmul")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(N, C, Hp, Wp) -> rows (N*Ho*Wo, kh*kw*C) ordered (i, j, c)."""
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    sn, sh, sw, sc = xt.strides
    cols = as_strided(xt, (n, ho, wo, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col` (overlapping windows are summed)."""
    n, c, hp, wp = xp_shape
    dc = np.ascontiguousarray(dcols.reshape(n, ho, wo, kh, kw, c).transpose(3, 4, 0, 5, 1, 2))
    s = stride
    if s > 1 and kh % s == 0 and kw % s == 0 and hp % s == 0 and wp % s == 0:
        # accumulate per output phase so every add is over a contiguous block
        phases = np.zeros((s, s, n, c, hp // s, wp // s), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                u, v = i // s, j // s
                phases[i % s, j % s, :, :, u:u + ho, v:v + wo] += dc[i, j]
        return phases.transpose(2, 3, 4, 0, 5, 1).reshape(n, c, hp, wp)
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += dc[i, j]
    return out


def _rows(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C)."""
    return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])


def _check_conv(x: Tensor, w: Tensor, cin_axis: int, op: str) -> None:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{op}: input {x.shape} and weight {w.shape} do not conform")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``w`` is (out, in, kh, kw), zero padding is explicit."""
    _check_conv(x, w, 1, "conv2d")
    o, c, kh, kw = w.shape
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    p = padding
    n = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wm = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = (cols @ wm).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        gm = _rows(g)
        gx = gw = gb = None
        if x.requires_grad:
            dxp = _col2im(gm @ wm.T, xp.shape, kh, kw, stride, ho, wo)
            gx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        if w.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)
    return _node(out, parents, bw, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is (in, out, kh, kw).

    Output size is ``(H - 1) * stride + kh - 2 * padding``.
    """
    _check_conv(x, w, 0, "conv2d_transpose")
    n, cin, h, wd_ = x.shape
    _, cout, kh, kw = w.shape
    p = padding
    hf, wf = (h - 1) * stride + kh, (wd_ - 1) * stride + kw
    if hf - 2 * p <= 0 or wf - 2 * p <= 0:
        raise ShapeError(f"conv2d_transpose: padding {p} too large for input {x.shape}")
    xm = _rows(x.data)
    wm = w.data.transpose(0, 2, 3, 1).reshape(cin, kh * kw * cout)
    full = _col2im(xm @ wm, (n, cout, hf, wf), kh, kw, stride, h, wd_)
    out = full[:, :, p:hf - p, p:wf - p]
    parents = [x, w]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        cols, _, _ = _im2col(gfull, kh, kw, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (cols @ wm.T).reshape(n, h, wd_, cin).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xm.T @ cols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)
    return _node(out, parents, bw, "conv2d_transpose")


def max_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k max pooling (input sides must divide by k)."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"max_pool: input {x.shape} not divisible by window {k}")
    if k == 1:
        return _node(x.data, (x,), lambda g: (g,), "max_pool")
    xd = x.data
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = xd[:, :, 0::k, 0::k].copy()
    for i, j in offsets[1:]:
        np.maximum(out, xd[:, :, i::k, j::k], out=out)

    def bw(g):
        gx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        # ties go to the first maximal element in row-major window order
        for i, j in offsets:
            hit = (xd[:, :, i::k, j::k] == out) & ~taken
            gx[:, :, i::k, j::k] = g * hit
            taken |= hit
        return (gx,)
    return _node(out, (x,), bw, "max_pool")
