"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Operations on tensors that require
gradients record their parents and a backward closure; :meth:`Tensor.backward`
replays the recorded graph in reverse topological order. Volumes use the
[C, D, H, W] layout throughout, with an optional leading batch axis for the
convolution family.

Float32 is the default precision. Gradient checks switch to float64 with
:func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient {grad.shape} does not match tensor {self.shape}")
        order = _topological_order(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self:
                node.grad = None

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
        dtype = _DEFAULT_DTYPE
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _result(out, (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return _result(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                                           _unbroadcast(np.where(cond, 0, g), sb)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows, unlike 1 / (1 + exp(-x))
    out = np.tanh(x * 0.5)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid_np(ad)
    return _result(ad * s, (a,), lambda g: (g * (s + ad * s * (1 - s)),))


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) / count


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    ad = a.data
    if axis is None:
        flat = ad.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx].copy()
        if keepdims:
            out = out.reshape((1,) * ad.ndim)

        def backward_all(g):
            z = np.zeros(ad.size, dtype=ad.dtype)
            z[idx] = np.asarray(g).reshape(-1)[0]
            return (z.reshape(ad.shape),)

        return _result(np.asarray(out), (a,), backward_all)
    axis = axis % ad.ndim
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        z = np.zeros_like(ad)
        np.put_along_axis(z, idx, g, axis=axis)
        return (z,)

    return _result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    e = np.exp(ad - ad.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _result(ls, (a,), backward)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization over [N, C, *spatial] with per-channel affine."""
    n, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels (input {x.shape})")
    xr = x.data.reshape(n, groups, -1)
    mu = xr.mean(axis=-1, keepdims=True)
    var = xr.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    parents = [x] + [p for p in (weight, bias) if p is not None]
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gw = (g * xhat).sum(axis=red) if weight is not None else None
        gb = g.sum(axis=red) if bias is not None else None
        gx_hat = g * weight.data.reshape(bshape) if weight is not None else g
        gh = gx_hat.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xh * (gh * xh).mean(axis=-1, keepdims=True))
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _result(np.array(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _result(np.array(out), (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), backward)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a triple, got {v}")
    return v


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x`` [N, Cin, D, H, W] with ``w`` [Cout, Cin, kd, kh, kw]."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias {b.shape} does not match weight {w.shape}")
    n, cin, d, h, wd = x.shape
    cout = w.shape[0]
    ks = w.shape[2:]
    st = _triple(stride)
    pd = _triple(padding)
    do, ho, wo = (kernels.conv_out_size(s, k, t, p) for s, k, t, p in zip((d, h, wd), ks, st, pd))
    if min(do, ho, wo) < 1:
        raise ShapeError(f"conv3d: kernel {ks} with padding {pd} does not fit input {x.shape}")
    pointwise = ks == (1, 1, 1) and st == (1, 1, 1) and pd == (0, 0, 0)
    if pointwise:
        cols = x.data.reshape(n, cin, d * h * wd)
    else:
        cols = kernels.im2col3d(x.data, ks, st, pd)
    w2 = w.data.reshape(cout, -1)
    if n == 1:
        out = (w2 @ cols[0])[None]
    else:
        out = w2 @ cols
    out = out.reshape(n, cout, do, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    xshape, wshape = x.shape, w.shape

    def backward(g):
        g2 = g.reshape(n, cout, -1)
        if n == 1:
            gw = g2[0] @ cols[0].T
            gcols = (w2.T @ g2[0])[None]
        else:
            gw = np.einsum("ncp,nkp->ck", g2, cols)
            gcols = w2.T @ g2
        if pointwise:
            gx = gcols.reshape(xshape)
        elif x.requires_grad:
            gx = kernels.col2im3d(gcols, xshape, ks, st, pd)
        else:
            gx = None
        grads = [gx, gw.reshape(wshape)]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(out, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation of ``x`` [N, Cin, H, W] with ``w`` [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    s = (1, stride, stride) if isinstance(stride, int) else (1, *stride)
    p = (0, padding, padding) if isinstance(padding, int) else (0, *padding)
    n, c, h, wd = x.shape
    out = conv3d(reshape(x, (n, c, 1, h, wd)), reshape(w, (w.shape[0], w.shape[1], 1) + w.shape[2:]),
                 b, s, p)
    return reshape(out, (n, out.shape[1]) + out.shape[3:])


def deform_conv2d(x: Tensor, offsets: Tensor, w: Tensor, b: Tensor | None = None,
                  padding: int | None = None) -> Tensor:
    """Deformable 2D convolution of a single feature map ``x`` [C, H, W].

    ``offsets`` [2*k*k, H', W'] displaces every kernel tap (dy, dx interleaved)
    before bilinear sampling; samples outside the map read zero. With all
    offsets zero the result equals :func:`conv2d` bit for bit.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"deform_conv2d expects x [C,H,W] and square w, got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"deform_conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    ho = kernels.conv_out_size(x.shape[1], k, 1, pad)
    wo = kernels.conv_out_size(x.shape[2], k, 1, pad)
    if offsets.shape != (2 * k * k, ho, wo):
        raise ShapeError(f"deform_conv2d offsets {offsets.shape} != expected {(2 * k * k, ho, wo)}")
    cout = w.shape[0]
    xd = x.data
    od = offsets.data.astype(xd.dtype, copy=False)
    cols = kernels.deform_im2col(xd, od, k, pad)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(cout, 1, 1)
    parents = (x, offsets, w) if b is None else (x, offsets, w, b)
    wshape = w.shape

    def backward(g):
        g2 = g.reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(wshape)
        gx = goff = None
        if x.requires_grad or offsets.requires_grad:
            gx, goff = kernels.deform_col2im(w2.T @ g2, xd, od, k, pad)
        grads = [gx, goff, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _result(out, parents, backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Linear interpolation weights [n_out, n_in], half-pixel aligned, edge clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_trilinear(x: Tensor, factor: int | None = None, size=None) -> Tensor:
    """Trilinear resize of the last three axes of ``x``."""
    if x.ndim < 3:
        raise ShapeError(f"upsample_trilinear needs rank >= 3, got {x.shape}")
    spatial = x.shape[-3:]
    if size is None:
        if factor is None or factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        size = tuple(int(s * factor) for s in spatial)
    mats = [_interp_matrix(si, so, x.dtype) for si, so in zip(spatial, size)]
    nd = x.ndim

    def apply(arr, ms):
        for k, m in enumerate(ms):
            ax = nd - 3 + k
            arr = np.moveaxis(np.tensordot(m, arr, axes=([1], [ax])), 0, ax)
        return arr

    out = apply(x.data, mats)
    return _result(np.ascontiguousarray(out), (x,),
                   lambda g: (np.ascontiguousarray(apply(g, [m.T for m in mats])),))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    The relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    ``point`` must be float64.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    if base.dtype != np.float64:
        raise ValueError(f"grad_check needs a float64 point, got {base.dtype}")
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    numeric = np.empty_like(base)
    work = base.copy()
    flat = work.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(work)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(work)).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max())
