"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays in the canonical batch x channels x height x width
layout (where an op cares about layout at all). Gradient tracking is
graph-on-tensor: every op that sees a gradient-requiring input records its
parents and a closure that maps the output gradient to parent gradients.
``Tensor.backward`` replays the graph in reverse topological order.

Ops that can leave their domain (log, divide, exp overflow, sqrt) raise
:class:`~denseflow.errors.NumericDomainError` instead of poisoning the
graph with NaN/inf.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DenseFlowError, NumericDomainError, ShapeError

# per-thread so concurrent no_grad evaluations cannot race each other
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inverse paths, eval)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


class Tensor:
    """A dense array plus an optional handle into the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self):
        """A view of the same data with no graph attachment."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ------------------------------------------------

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

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    # -- backward ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar; fills ``grad`` on every
        reachable tensor that requires one."""
        if self.data.size != 1:
            raise DenseFlowError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.dtype, copy=False)
                else:
                    parent.grad = parent.grad + g


class Tape:
    """Registry of trainable tensors, keyed by unique name."""

    def __init__(self):
        self.parameters = {}

    def register(self, name, tensor):
        if name in self.parameters:
            raise DenseFlowError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        tensor.name = name
        self.parameters[name] = tensor
        return tensor

    def zero_grad(self):
        for p in self.parameters.values():
            p.grad = None

    def gradients(self, loss):
        """Run backward from ``loss`` and return one gradient array per
        registered parameter (zeros where the loss does not reach)."""
        self.zero_grad()
        loss.backward()
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.parameters.items()
        }


def backward(loss, tape):
    """Gradient of a scalar loss for every parameter on ``tape``."""
    return tape.gradients(loss)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _pair(a, b):
    """Coerce binary-op operands; python scalars adopt the tensor operand's
    dtype instead of promoting the result to float64."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(_scalar_like(b, a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(_scalar_like(a, b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _scalar_like(x, dtype):
    arr = np.asarray(x)
    if arr.ndim == 0 and arr.dtype.kind in "if" and np.dtype(dtype).kind == "f":
        return arr.astype(dtype)
    return arr


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), back)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), back)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), back)


def div(a, b):
    a, b = _pair(a, b)
    if (b.data == 0).any():
        raise NumericDomainError("divide", "zero denominator")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(out, (a, b), back)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def back(g):
        return (g * p * a.data ** (p - 1),)

    return _result(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NumericDomainError("exp", "overflow to non-finite")
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericDomainError("log", "non-positive input")
    out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NumericDomainError("sqrt", "negative input")
    out = np.sqrt(a.data)

    def back(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), back)


def absolute(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    return _result(out, (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), back)


def softplus(a):
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _result(out, (a,), back)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (a.data > 0),))


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def back(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _result(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def amax(a, axis=None, keepdims=False):
    """Max reduction; gradient splits evenly across tied maxima."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        full = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            full = np.expand_dims(out, axis)
        mask = (a.data == full).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * g,)

    return _result(out, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size / out.size

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _result(out, (a,), back)


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), back)


def _im2col(xp_t, kh, kw, ho, wo):
    """Unfold channel-first padded input (c, b, H, W) into a
    (kh*kw*c, b*ho*wo) matrix so the convolution is one large GEMM."""
    c, b = xp_t.shape[:2]
    cols = np.empty((kh, kw, c, b, ho, wo), dtype=xp_t.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[u, v] = xp_t[:, :, u : u + ho, v : v + wo]
    return cols.reshape(kh * kw * c, b * ho * wo)


def conv2d(x, kernel, padding=0):
    """2-d cross-correlation (no kernel flip), stride 1, symmetric padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    b, cin, h, w = x.shape
    cout, kin, kh, kw = kernel.shape
    if kin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ShapeError("conv2d padding must be >= 0")
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d output extent non-positive: {ho}x{wo} from {h}x{w} "
            f"kernel {kh}x{kw} padding {padding}"
        )
    # Channel-mix first (one large GEMM), then accumulate spatial shifts;
    # avoids materializing im2col columns on the forward pass.
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))  # c,b,h,w
    k_rows = np.ascontiguousarray(kernel.data.transpose(2, 3, 0, 1)).reshape(
        kh * kw * cout, cin
    )
    mixed = (k_rows @ xt.reshape(cin, b * h * w)).reshape(kh, kw, cout, b, h, w)
    p = padding
    if kh == 1 and kw == 1 and p == 0:
        out_t = mixed[0, 0]
    else:
        out_t = np.zeros((cout, b, ho, wo), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                # out[i,j] += mixed[u,v][i+u-p, j+v-p] over the valid overlap
                i0, i1 = max(0, p - u), min(ho, h + p - u)
                j0, j1 = max(0, p - v), min(wo, w + p - v)
                if i0 >= i1 or j0 >= j1:
                    continue
                out_t[:, :, i0:i1, j0:j1] += mixed[
                    u, v, :, :, i0 + u - p : i1 + u - p, j0 + v - p : j1 + v - p
                ]
    out = np.ascontiguousarray(out_t.transpose(1, 0, 2, 3))

    def back(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, b * ho * wo)
        # kernel grad via im2col of the padded input (training path only)
        if kh == 1 and kw == 1 and p == 0:
            cols = xt.reshape(cin, b * h * w)
        else:
            if p:
                xp_t = np.zeros((cin, b, h + 2 * p, w + 2 * p), dtype=x.dtype)
                xp_t[:, :, p : p + h, p : p + w] = xt
            else:
                xp_t = xt
            cols = _im2col(xp_t, kh, kw, ho, wo)
        gk = (gt @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        # input grad: mix g by the kernel transpose, then shift-accumulate
        kb_rows = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(
            kh * kw * cin, cout
        )
        mixedb = (kb_rows @ gt).reshape(kh, kw, cin, b, ho, wo)
        if kh == 1 and kw == 1 and p == 0:
            gx_t = mixedb[0, 0]
        else:
            gx_t = np.zeros((cin, b, h, w), dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    # x[m,n] received g[i,j] with m = i+u-p: invert the shift
                    m0, m1 = max(0, u - p), min(h, ho + u - p)
                    n0, n1 = max(0, v - p), min(w, wo + v - p)
                    if m0 >= m1 or n0 >= n1:
                        continue
                    gx_t[:, :, m0:m1, n0:n1] += mixedb[
                        u, v, :, :, m0 - u + p : m1 - u + p, n0 - v + p : n1 - v + p
                    ]
        gx = np.ascontiguousarray(gx_t.transpose(1, 0, 2, 3))
        return gx, np.ascontiguousarray(gk)

    return _result(out, (x, kernel), back)


def softmax(a):
    """Numerically stable softmax over the last axis (max subtraction)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _result(out, (a,), back)


# ---------------------------------------------------------------------------
# shape suite


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: (g.transpose(inv),))


def concat(parts, axis=1):
    parts = [as_tensor(p) for p in parts]
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError(
                f"concat extents disagree off axis {axis}: "
                f"{[tuple(q.shape) for q in parts]}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _result(out, tuple(parts), back)


def split(a, sizes, axis=1):
    """Split into consecutive chunks of the given sizes along ``axis``."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(
            f"split sizes {sizes} do not cover extent {a.shape[axis]} of {a.shape}"
        )
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        slicer = [slice(None)] * a.ndim
        slicer[axis] = slice(offsets[i], offsets[i + 1])
        slicer = tuple(slicer)
        piece = np.ascontiguousarray(a.data[slicer])

        def back(g, slicer=slicer):
            full = np.zeros_like(a.data)
            full[slicer] = g
            return (full,)

        outs.append(_result(piece, (a,), back))
    return outs


def space_to_channel(a):
    """b x c x h x w -> b x 4c x h/2 x w/2; cell entries read row-major."""
    a = as_tensor(a)
    b, c, h, w = _require_4d(a, "space_to_channel")
    if h % 2 or w % 2:
        raise ShapeError(f"space_to_channel needs even spatial extents, got {h}x{w}")
    out = (
        a.data.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, 4 * c, h // 2, w // 2)
    )

    def back(g):
        return (_channel_to_space_data(g),)

    return _result(np.ascontiguousarray(out), (a,), back)


def _channel_to_space_data(y):
    b, c4, h, w = y.shape
    c = c4 // 4
    return np.ascontiguousarray(
        y.reshape(b, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, 2 * h, 2 * w)
    )


def channel_to_space(a):
    """Exact inverse of :func:`space_to_channel`."""
    a = as_tensor(a)
    b, c4, h, w = _require_4d(a, "channel_to_space")
    if c4 % 4:
        raise ShapeError(f"channel_to_space needs channels divisible by 4, got {c4}")
    out = _channel_to_space_data(a.data)

    def back(g):
        return (
            np.ascontiguousarray(
                g.reshape(b, c4 // 4, 2 * h // 2, 2, 2 * w // 2, 2)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(b, c4, h, w)
            ),
        )

    return _result(out, (a,), back)


def _require_4d(a, op):
    if a.ndim != 4:
        raise ShapeError(f"{op} expects a 4-d tensor, got {a.shape}")
    return a.shape
