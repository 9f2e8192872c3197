"""Dense tensors with reverse-mode automatic differentiation.

Forward operations eagerly compute numpy arrays and, when any input
requires gradients, record a backward closure on the output node. The
recorded graph doubles as the tape: eager execution order is already
topological, and ``backward`` replays it in reverse. A tape is consumed
by its first backward pass; running backward twice without re-running
the forward pass is an error.

Conventions:

- float32 for training, float64 for gradient checking; operations keep
  the dtype of their inputs.
- Broadcasting follows trailing-dimension alignment (numpy rules).
- Gradients accumulate by summation over all paths.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DimensionError, ConfigError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float array participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out: Tensor, parents, backward_fn):
    """Attach the backward closure when grad mode is on and needed."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a_shape, b_shape):
    for x, y in zip(reversed(a_shape), reversed(b_shape)):
        if x != y and x != 1 and y != 1:
            raise DimensionError(
                f"shapes {tuple(a_shape)} and {tuple(b_shape)} are not broadcast-compatible"
            )


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot matmul shapes {tuple(a.shape)} and {tuple(b.shape)}")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _record(out, (a, b), backward_fn)


def relu(t) -> Tensor:
    t = as_tensor(t)
    out = Tensor(np.maximum(t.data, 0))

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g * (t.data > 0))

    return _record(out, (t,), backward_fn)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    # stable for large |x|: exp of a non-positive argument only
    e = np.exp(-np.abs(t.data))
    y = np.where(t.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y.astype(t.dtype, copy=False))

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g * out.data * (1.0 - out.data))

    return _record(out, (t,), backward_fn)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    if not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {tuple(t.shape)}")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward_fn(g):
        if t.requires_grad:
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            t._accumulate(out.data * (g - dot))

    return _record(out, (t,), backward_fn)


def layer_norm(t, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    t, gain, bias = as_tensor(t), as_tensor(gain), as_tensor(bias)
    n = t.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({n},), got {tuple(gain.shape)} and {tuple(bias.shape)}"
        )
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward_fn(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if t.requires_grad:
            gy = g * gain.data
            mean_gy = gy.mean(axis=-1, keepdims=True)
            mean_gyx = (gy * xhat).mean(axis=-1, keepdims=True)
            t._accumulate(inv * (gy - mean_gy - xhat * mean_gyx))

    return _record(out, (t, gain, bias), backward_fn)


def _normalize_axes(axes, ndim):
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    norm = tuple(sorted(ax % ndim for ax in axes))
    if len(set(norm)) != len(norm):
        raise DimensionError(f"duplicate axes {axes}")
    return norm


def mean_over(t, axes) -> Tensor:
    t = as_tensor(t)
    axes = _normalize_axes(axes, t.data.ndim)
    count = 1
    for ax in axes:
        count *= t.shape[ax]
    out = Tensor(t.data.mean(axis=axes))

    def backward_fn(g):
        if t.requires_grad:
            g_full = np.expand_dims(g, axes)
            t._accumulate(np.broadcast_to(g_full / count, t.shape).astype(t.dtype))

    return _record(out, (t,), backward_fn)


def sum_over(t, axes=None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(range(t.data.ndim))
    axes = _normalize_axes(axes, t.data.ndim)
    out = Tensor(t.data.sum(axis=axes))

    def backward_fn(g):
        if t.requires_grad:
            g_full = np.expand_dims(g, axes)
            t._accumulate(np.broadcast_to(g_full, t.shape).astype(t.dtype))

    return _record(out, (t,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis % len(ref) and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: {[tuple(t.shape) for t in tensors]}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _record(out, tuple(tensors), backward_fn)


def reshape(t, shape) -> Tensor:
    t = as_tensor(t)
    out = Tensor(t.data.reshape(shape))

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g.reshape(t.shape))

    return _record(out, (t,), backward_fn)


def transpose(t, axes=None) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(t.data.ndim)))
    inverse = np.argsort(axes)
    out = Tensor(t.data.transpose(axes))

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g.transpose(inverse))

    return _record(out, (t,), backward_fn)


def gather_rows(t, indices) -> Tensor:
    """Row lookup t[indices]; the gradient scatters into the taken rows."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if t.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {tuple(t.shape)}")
    out = Tensor(t.data[idx])

    def backward_fn(g):
        if t.requires_grad:
            acc = np.zeros_like(t.data)
            np.add.at(acc, idx, g)
            t._accumulate(acc)

    return _record(out, (t, ), backward_fn)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(v)
    if len(v) != 3:
        raise ConfigError(f"expected an int or 3 ints, got {v}")
    return v


def conv3d(x, kernel, stride=1, padding=0) -> Tensor:
    """Cross-correlation over the three trailing axes of a [n,c,f,h,w] input.

    Internally the input is held channels-last so that each of the
    kf*kh*kw kernel offsets contributes one contiguous (..., c) @ (c, ko)
    matrix product; the backward pass mirrors the same offset loop.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects input [n,c,f,h,w] and kernel [k,c,kf,kh,kw], "
            f"got {tuple(x.shape)} and {tuple(kernel.shape)}"
        )
    n, c, f, h, w = x.shape
    ko, kc, kf, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv3d channel mismatch: input has {c}, kernel expects {kc}")
    sf, sh, sw = _triple(stride)
    pf, ph, pw = _triple(padding)
    of = (f + 2 * pf - kf) // sf + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if of <= 0 or oh <= 0 or ow <= 0:
        raise ConfigError(
            f"conv3d output dims ({of},{oh},{ow}) must be positive for input "
            f"{(f, h, w)}, kernel {(kf, kh, kw)}, stride {(sf, sh, sw)}, padding {(pf, ph, pw)}"
        )

    xp = x.data
    if pf or ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (pf, pf), (ph, ph), (pw, pw)))
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))        # (n,F,H,W,c)
    kl = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # (kf,kh,kw,c,ko)

    def _window(arr, a, b, d):
        return arr[:, a:a + sf * of:sf, b:b + sh * oh:sh, d:d + sw * ow:sw, :]

    out_l = np.zeros((n, of, oh, ow, ko), dtype=xl.dtype)
    for a in range(kf):
        for b in range(kh):
            for d in range(kw):
                out_l += _window(xl, a, b, d) @ kl[a, b, d]
    out = Tensor(np.ascontiguousarray(out_l.transpose(0, 4, 1, 2, 3)))

    def backward_fn(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        if kernel.requires_grad:
            dkl = np.empty_like(kl)
            for a in range(kf):
                for b in range(kh):
                    for d in range(kw):
                        dkl[a, b, d] = np.tensordot(
                            _window(xl, a, b, d), gl, axes=([0, 1, 2, 3], [0, 1, 2, 3])
                        )
            kernel._accumulate(np.ascontiguousarray(dkl.transpose(4, 3, 0, 1, 2)))
        if x.requires_grad:
            dxl = np.zeros_like(xl)
            for a in range(kf):
                for b in range(kh):
                    for d in range(kw):
                        _window(dxl, a, b, d).__iadd__(gl @ kl[a, b, d].T)
            dxp = dxl.transpose(0, 4, 1, 2, 3)
            if pf or ph or pw:
                dxp = dxp[:, :, pf:pf + f, ph:ph + h, pw:pw + w]
            x._accumulate(np.ascontiguousarray(dxp))

    return _record(out, (x, kernel), backward_fn)


def backward(loss: Tensor):
    """Populate .grad on every requires_grad tensor reachable from loss.

    The loss must be scalar (a single element). The tape is consumed:
    calling backward again on the same graph raises UsageError.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss._released:
        raise UsageError("backward was already run on this tape; re-run the forward pass")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._released:
            raise UsageError("tape already consumed by a previous backward; re-run the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p._backward_fn is not None or p._released):
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward_fn
        if fn is not None and node.grad is not None:
            fn(node.grad)
        node._released = True
        node._backward_fn = None
        node._parents = ()
        if node is not loss:
            node.grad = None
