"""Minimal reverse-mode autodiff over numpy arrays.

Just enough machinery to express three small convolutional networks and
their losses: every op records a closure that scatters the upstream
gradient back to its inputs, and ``Tensor.backward`` replays those
closures in reverse topological order.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "constant",
    "parameter",
    "conv2d",
    "batch_norm",
    "relu",
    "leaky_relu",
    "sigmoid",
    "max_pool2",
    "upsample_nearest2",
    "channel_max",
    "channel_min",
    "record_kinks",
    "set_default_dtype",
    "get_default_dtype",
]

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype):
    """Set the dtype used when lifting plain python/list data into Tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported compute dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar root, repeated backward)."""


class ShapeError(ValueError):
    """Incompatible operand shapes."""


_KINKS = threading.local()


class record_kinks:
    """Collects the branch decisions of every non-smooth op in a forward pass.

    Two passes with equal signatures lie on the same smooth piece of the
    function, which is what finite-difference probing needs to verify.
    Recording is per-thread, so parallel solves stay independent.
    """

    def __init__(self):
        self.signature = None

    def __enter__(self):
        self._saved = getattr(_KINKS, "log", None)
        _KINKS.log = []
        return self

    def __exit__(self, exc_type, exc, tb):
        self.signature = b"".join(_KINKS.log)
        _KINKS.log = self._saved
        return False


def _log_kink(indices):
    log = getattr(_KINKS, "log", None)
    if log is not None:
        log.append(indices.tobytes())


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode grads.

    ``data`` and ``grad`` always share a shape; ``grad`` starts at zero and
    is filled in by ``backward`` on a downstream scalar. Intermediate
    tensors keep references to their parents so the graph of one forward
    pass stays alive exactly as long as its root does.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad=False, _parents=(), _grad_fn=None):
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def backward(self):
        """Populate grads of every tensor reachable from this scalar root."""
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.data.shape}")
        if self._spent:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        self._spent = True

        topo = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for parent in parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is not None and node.requires_grad:
                node._grad_fn(node.grad)

    # -- arithmetic sugar -------------------------------------------------

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def square(self):
        return square(self)

    def sqrt(self):
        return tsqrt(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def reshape(self, shape):
        return reshape(self, shape)


def constant(data):
    """Leaf tensor that does not take gradient (inputs, fixed kernels)."""
    return Tensor(data, requires_grad=False)


def parameter(data):
    """Leaf tensor that accumulates gradient (learnable weights)."""
    return Tensor(data, requires_grad=True)


def _result(data, parents, grad_fn):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents), _grad_fn=grad_fn if needs else None)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ops ----------------------------------------------


def add(a, b):
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _result(out_data, (a, b), grad_fn)


def sub(a, b):
    out_data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _result(out_data, (a, b), grad_fn)


def mul(a, b):
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _result(out_data, (a, b), grad_fn)


def div(a, b):
    out_data = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _result(out_data, (a, b), grad_fn)


# -- elementwise unary ops -------------------------------------------------


def square(a):
    def grad_fn(g):
        a.grad += g * (2.0 * a.data)

    return _result(a.data * a.data, (a,), grad_fn)


def tsqrt(a):
    out_data = np.sqrt(a.data)

    def grad_fn(g):
        a.grad += g / (2.0 * out_data)

    return _result(out_data, (a,), grad_fn)


def texp(a):
    out_data = np.exp(a.data)

    def grad_fn(g):
        a.grad += g * out_data

    return _result(out_data, (a,), grad_fn)


def tlog(a):
    def grad_fn(g):
        a.grad += g / a.data

    return _result(np.log(a.data), (a,), grad_fn)


def relu(a):
    # subgradient at 0 follows the positive branch
    mask = a.data >= 0
    _log_kink(mask)

    def grad_fn(g):
        a.grad += g * mask

    return _result(np.where(mask, a.data, 0.0), (a,), grad_fn)


def leaky_relu(a, slope=0.2):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = a.data >= 0
    _log_kink(mask)
    slope = a.data.dtype.type(slope)

    def grad_fn(g):
        a.grad += g * np.where(mask, a.data.dtype.type(1.0), slope)

    return _result(np.where(mask, a.data, slope * a.data), (a,), grad_fn)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        a.grad += g * out_data * (1.0 - out_data)

    return _result(out_data, (a,), grad_fn)


# -- reductions -------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        a.grad += _expand_reduced(g, a.data.shape, axis, keepdims)

    return _result(out_data, (a,), grad_fn)


def tmean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // out_data.size

    def grad_fn(g):
        a.grad += _expand_reduced(g, a.data.shape, axis, keepdims) / n

    return _result(out_data, (a,), grad_fn)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    def grad_fn(g):
        a.grad += g.reshape(a.data.shape)

    return _result(a.data.reshape(shape), (a,), grad_fn)


# -- channel-axis min/max (serves the HSV terms) ------------------------------


def channel_max(a):
    """Elementwise max across the channel axis of an NCHW tensor -> N,1,H,W.

    Gradient routes to the argmax channel; ties go to the lowest index.
    """
    idx = np.argmax(a.data, axis=1)[:, None]
    _log_kink(idx)
    out_data = np.take_along_axis(a.data, idx, axis=1)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=1)
        a.grad += ga

    return _result(out_data, (a,), grad_fn)


def channel_min(a):
    """Elementwise min across the channel axis of an NCHW tensor -> N,1,H,W."""
    idx = np.argmin(a.data, axis=1)[:, None]
    _log_kink(idx)
    out_data = np.take_along_axis(a.data, idx, axis=1)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=1)
        a.grad += ga

    return _result(out_data, (a,), grad_fn)


# -- spatial ops ---------------------------------------------------------------


def _pad_amount(padding, k):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got k={k}")
        return (k - 1) // 2
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ValueError(f"padding must be 'same' or a non-negative int, got {padding!r}")


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """Cross-correlation of NCHW input with OIkk kernel plus per-channel bias.

    Implemented as im2col + one matmul; the column matrix is assembled from
    k*k contiguous slices and kept for the backward pass (one matmul each
    for the kernel and input gradients).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.data.shape} and {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kernel.data.shape}")
    if cin != cin_k:
        raise ShapeError(
            f"conv2d channel mismatch: input has shape {x.data.shape} (Cin={cin}) "
            f"but kernel has shape {kernel.data.shape} (Cin={cin_k})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = kh
    p = _pad_amount(padding, k)

    if p > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < k or wp < k:
        raise ShapeError(f"input {x.data.shape} too small for kernel size {k} with padding {p}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    ckk = cin * k * k
    cols = np.empty((n, ckk, ho * wo), dtype=x.data.dtype)
    cols_v = cols.reshape(n, cin, k * k, ho, wo)
    for i in range(k):
        for j in range(k):
            cols_v[:, :, i * k + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    w2 = kernel.data.reshape(cout, ckk)
    out_data = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        g2 = g.reshape(n, cout, ho * wo)
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))
        if kernel.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel.grad += gw.reshape(kernel.data.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, k * k, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i * k + j]
            if p > 0:
                x.grad += gxp[:, :, p : p + h, p : p + w]
            else:
                x.grad += gxp

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out_data, parents, grad_fn)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Per-channel normalization over the batch and spatial extent.

    With batch size 1 this is instance-style normalization; statistics come
    from the current pass only and the gradient flows through them.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm eps must be > 0, got {eps}")
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match {c} channels"
        )
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        if beta.requires_grad:
            beta.grad += g.sum(axis=axes)
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=axes)
        if x.requires_grad:
            gxh = g * gamma.data.reshape(1, c, 1, 1)
            x.grad += inv * (gxh - gxh.mean(axis=axes, keepdims=True) - xhat * (gxh * xhat).mean(axis=axes, keepdims=True))

    return _result(out_data, (x, gamma, beta), grad_fn)


def max_pool2(x):
    """2x2 max pooling with stride 2; ties route gradient to the lowest index."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2 expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(win, axis=-1)
    _log_kink(idx)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        x.grad += gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    return _result(out_data, (x,), grad_fn)


def upsample_nearest2(x):
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        x.grad += g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _result(out_data, (x,), grad_fn)
