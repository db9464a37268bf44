"""Dense n-d tensors with reverse-mode automatic differentiation.

Arrays are numpy buffers (float32 by default, float64 for oracle work).
Every op records its parents and a backward closure; `backward()` walks the
graph in reverse topological order and accumulates gradients additively, so
fan-out just works. Reductions inherit numpy's fixed deterministic order,
which keeps repeated runs bit-identical.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_STATE = threading.local()


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path).

    Thread-local, so concurrent inference never disables another thread's
    training graph.
    """
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class ShapeError(ValueError):
    """Raised on operand shape mismatch; names the op and both shapes."""

    def __init__(self, op, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} vs {self.shape_b}")


class Tensor:
    """A numpy-backed array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        elif dtype is None and not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            # lists/scalars default to the 32-bit training dtype; explicit
            # float64 arrays keep full precision for oracle work
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = None

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- basic properties -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        """Cut the graph: same buffer, no gradient history."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; fills `.grad` on every reachable leaf."""
        if self.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def _coerce(self, other, op):
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(f"{op} (dtype {other.dtype} vs {self.dtype})", self.shape, other.shape)
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other, "add"))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, self._coerce(other, "sub") * -1.0)

    def __rsub__(self, other):
        return add(self._coerce(other, "sub"), self * -1.0)

    def __mul__(self, other):
        return mul(self, self._coerce(other, "mul"))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self._coerce(other, "div") * self ** -1.0

    def __neg__(self):
        return self * -1.0

    def __pow__(self, exponent):
        return pow_scalar(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, self._coerce(other, "matmul"))

    def __getitem__(self, idx):
        return slice_(self, idx)

    # -- shape manipulation --------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ops ----------------------------------------------


def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), backward)


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data).reshape(a.shape)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g).reshape(b.shape)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), backward)


# -- elementwise unary ops -------------------------------------------------


def pow_scalar(x, p):
    data = x.data**p

    def backward(g):
        x._accumulate(g * p * x.data ** (p - 1.0))

    return Tensor._result(data, (x,), backward)


def exp(x):
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return Tensor._result(data, (x,), backward)


def log(x):
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor._result(data, (x,), backward)


def sqrt(x):
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return Tensor._result(data, (x,), backward)


def sigmoid(x):
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (x,), backward)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * s

    def backward(g):
        x._accumulate(g * s * (1.0 + x.data * (1.0 - s)))

    return Tensor._result(data, (x,), backward)


def tanh(x):
    data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - data * data))

    return Tensor._result(data, (x,), backward)


def clip(x, lo, hi):
    data = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data)
    if lo is not None:
        mask *= x.data >= lo
    if hi is not None:
        mask *= x.data <= hi

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._result(data, (x,), backward)


# -- reductions -------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).astype(x.data.dtype))

    return Tensor._result(np.asarray(data), (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in ax]))
    return sum_(x, axis, keepdims) * (1.0 / count)


def max_(x, axis, keepdims=False):
    """Max reduction; gradient routes to the (first) argmax per slice."""
    data = x.data.max(axis=axis, keepdims=True)
    mask = (x.data == data)
    # ties split the gradient to keep the op well defined
    mask = mask / mask.sum(axis=axis, keepdims=True)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(gg * mask)

    out = data if keepdims else np.squeeze(data, axis=axis)
    return Tensor._result(np.ascontiguousarray(out), (x,), backward)


def logsumexp(x, axis=-1, keepdims=False):
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = np.log(total) + m
    soft = shifted / total

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(gg * soft)

    out = data if keepdims else np.squeeze(data, axis=axis)
    return Tensor._result(out, (x,), backward)


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    return Tensor._result(data, (x,), backward)


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._result(data, (x,), backward)


def transpose(x, axes):
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return Tensor._result(data, (x,), backward)


def slice_(x, idx):
    data = x.data[idx]

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g.reshape(buf[idx].shape)
        x._accumulate(buf)

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


def concat(tensors, axis):
    for t in tensors[1:]:
        if (t.ndim != tensors[0].ndim
                or any(i != axis and t.shape[i] != tensors[0].shape[i] for i in range(t.ndim))):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward)


def embedding(table, ids):
    """Row lookup: table (V, D), integer ids of any shape -> (*ids.shape, D)."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(buf)

    return Tensor._result(np.ascontiguousarray(data), (table,), backward)


def gather(x, index, axis):
    """take_along_axis with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    data = np.take_along_axis(x.data, index, axis=axis)

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, _along_axis_indices(x.shape, index, axis), g)
        x._accumulate(buf)

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


def _along_axis_indices(shape, index, axis):
    grids = list(np.indices(index.shape))
    grids[axis] = index
    return tuple(grids)


# -- 2-D image ops ---------------------------------------------------------


def _conv2d_raw(x, w):
    """Valid-mode correlation of x (N,C,H,W) with w (K,C,kh,kw)."""
    n, c, h, width = x.shape
    k, _, kh, kw = w.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(k, -1).T
    return out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2), cols


def conv2d(x, w, b=None, padding="same"):
    """2-D convolution, stride 1, zero padding. Kernel must be odd for 'same'."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: 'same' padding needs odd kernels")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    out, _ = _conv2d_raw(xp, w.data)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        n, k, ho, wo = g.shape
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
            gw = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k).T @ cols
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            # grad wrt input: full correlation with the flipped, channel-swapped kernel
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gx, _ = _conv2d_raw(gp, wf)
            if ph or pw:
                gx = gx[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
            x._accumulate(np.ascontiguousarray(gx))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(np.ascontiguousarray(out), parents, backward)


def avg_pool2d(x, k=2):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accumulate(gx.astype(x.data.dtype))

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


def upsample_nearest2d(x, factor=2):
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        x._accumulate(gx)

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


def _catmull_rom(d):
    # Keys' bicubic kernel with a = -0.5
    a = -0.5
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    if d < 2.0:
        return a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
    return 0.0


def bicubic_matrix(n_in, n_out, dtype=np.float64):
    """(n_out, n_in) resize matrix, half-pixel centers, clamped edges."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        for tap in range(i0 - 1, i0 + 3):
            wgt = _catmull_rom(src - tap)
            m[o, min(max(tap, 0), n_in - 1)] += wgt
    return m.astype(dtype)


def upsample_bicubic2d(x, out_h, out_w):
    """Separable Catmull-Rom resize of (N,C,H,W) to (N,C,out_h,out_w)."""
    n, c, h, w = x.shape
    mh = bicubic_matrix(h, out_h, x.data.dtype)
    mw = bicubic_matrix(w, out_w, x.data.dtype)
    data = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)

    def backward(g):
        x._accumulate(np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True))

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


# -- composite layers/losses -------------------------------------------------


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Normalize (N,C,H,W) per sample over channel groups; scale/shift per channel."""
    n, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm", x.shape, gamma.shape)
    xg = reshape(x, (n, groups, c // groups * h * w))
    mu = mean(xg, axis=2, keepdims=True)
    xc = xg - mu
    var = mean(xc * xc, axis=2, keepdims=True)
    normed = xc * (var + eps) ** -0.5
    normed = reshape(normed, (n, c, h, w))
    return normed * reshape(gamma, (1, c, 1, 1)) + reshape(beta, (1, c, 1, 1))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis; scale/shift per feature."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * gamma + beta


def scaled_dot_product_attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v over trailing (length, head_dim) axes.

    `mask` is an optional additive numpy bias broadcastable to the score
    shape; use large negatives to exclude keys (they receive exactly zero
    weight after exp underflow).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", q.shape, k.shape)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask, dtype=scores.dtype))
    return matmul(softmax(scores, axis=-1), v)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    d = pred - target
    return mean(d * d)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    lse = logsumexp(logits, axis=-1)
    picked = gather(logits, labels[..., None], axis=-1)
    return mean(lse - reshape(picked, lse.shape))


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p):
    """Elementwise KL( N(mu_q, var_q) || N(mu_p, var_p) ) in nats."""
    var_ratio = exp(logvar_q - logvar_p)
    t = (mu_q - mu_p) ** 2.0 * exp(-logvar_p)
    return 0.5 * (var_ratio + t - 1.0 + logvar_p - logvar_q)
