"""Parameter/module plumbing and the layers shared by every network here."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor; its dotted-path name is assigned by the owning model."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class: children are discovered from attributes in definition order."""

    def _children(self):
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield attr, value
            elif isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for attr, value in self._children():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = name
                out.append((name, value))
            else:
                out.extend(value.named_parameters(prefix=name + "."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Parameter arrays keyed by dotted path, lexicographically ordered."""
        return {name: p.data for name, p in sorted(self.named_parameters())}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unknown = sorted(set(state) - set(params))
        if missing or unknown:
            raise KeyError(f"state dict mismatch: missing={missing} unknown={unknown}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {name}", p.shape, arr.shape)
            p.data = np.ascontiguousarray(arr)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32, scale=None,
                 zero_init=False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            std = scale if scale is not None else 1.0 / np.sqrt(n_in)
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.w = Parameter(w, dtype=dtype)
        self.b = Parameter(np.zeros(n_out), dtype=dtype) if bias else None

    def __call__(self, x):
        y = x @ self.w
        return y + self.b if self.b is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, padding="same", zero_init=False,
                 dtype=np.float32):
        fan_in = c_in * kernel * kernel
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, kernel, kernel))
        self.w = Parameter(w, dtype=dtype)
        self.b = Parameter(np.zeros(c_out), dtype=dtype)
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.groups = groups
        self.eps = eps

    def __call__(self, x):
        return T.group_norm(x, self.gamma, self.beta, self.groups, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), dtype=dtype)
        self.beta = Parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, vocab, dim, rng, dtype=np.float32):
        self.table = Parameter(rng.normal(0.0, 0.02, size=(vocab, dim)), dtype=dtype)

    def __call__(self, ids):
        return T.embedding(self.table, ids)


class MultiHeadAttention(Module):
    """Self- or cross-attention over (N, L, D) sequences with additive masks."""

    def __init__(self, dim, heads, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, x, n, length):
        # (N, L, D) -> (N, heads, L, D/heads)
        d = x.shape[-1] // self.heads
        return x.reshape(n, length, self.heads, d).transpose((0, 2, 1, 3))

    def __call__(self, x, context=None, mask=None):
        """`context` is extra (N, S, D) content appended to keys/values;
        `mask` is an additive numpy bias over key positions, shape (N, 1, 1, L+S)."""
        n, length, dim = x.shape
        qkv = self.qkv(x)
        q, k, v = (qkv[:, :, i * dim:(i + 1) * dim] for i in range(3))
        if context is not None:
            k = T.concat([k, context], axis=1)
            v = T.concat([v, context], axis=1)
        s = k.shape[1]
        q, k, v = self._split(q, n, length), self._split(k, n, s), self._split(v, n, s)
        att = T.scaled_dot_product_attention(q, k, v, mask=mask)
        att = att.transpose((0, 2, 1, 3)).reshape(n, length, dim)
        return self.out(att)


def key_padding_bias(valid, dtype=np.float32):
    """Additive attention bias from a boolean (N, S) key-validity mask."""
    bias = np.where(np.asarray(valid, dtype=bool), 0.0, -1e9).astype(dtype)
    return bias[:, None, None, :]
