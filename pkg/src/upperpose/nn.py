"""Layers built on the autograd tensors: parameter store, linear/MLP,
layer norm, and multi-head attention (the attention-plus-fc correction
block used for all token interaction)."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError
from .utils import stream_rng


class ParamStore:
    """Registry of named trainable tensors, seeded per parameter name."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, shape: tuple[int, ...], init: str = "glorot",
              fan: tuple[int, int] | None = None, gain: float = 1.0) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "glorot":
            if fan is None:
                fan = (int(np.prod(shape[:-1])), shape[-1])
            a = gain * math.sqrt(6.0 / (fan[0] + fan[1]))
            data = stream_rng(self.seed, "param", name).uniform(-a, a, shape)
        else:
            raise ValueError(f"unknown init: {init}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Linear:
    def __init__(self, ps: ParamStore, name: str, din: int, dout: int,
                 zero_init: bool = False):
        self.w = ps.param(f"{name}.weight", (din, dout),
                          "zeros" if zero_init else "glorot", fan=(din, dout))
        self.b = ps.param(f"{name}.bias", (dout,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.w) + self.b


class Conv2d:
    def __init__(self, ps: ParamStore, name: str, cin: int, cout: int,
                 kernel: tuple[int, int], stride: int = 1,
                 padding: tuple[int, int] = (0, 0), gain: float = 1.0):
        kh, kw = kernel
        self.w = ps.param(f"{name}.weight", (cout, cin, kh, kw), "glorot",
                          fan=(cin * kh * kw, cout * kh * kw), gain=gain)
        self.b = ps.param(f"{name}.bias", (cout,), "zeros")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return y + ag.reshape(self.b, (self.b.shape[0], 1, 1))


class Mlp:
    """Two-layer MLP with GELU in between."""

    def __init__(self, ps: ParamStore, name: str, din: int, hidden: int, dout: int,
                 zero_last: bool = False):
        self.fc1 = Linear(ps, f"{name}.fc1", din, hidden)
        self.fc2 = Linear(ps, f"{name}.fc2", hidden, dout, zero_init=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class LayerNorm:
    def __init__(self, ps: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = ps.param(f"{name}.gamma", (dim,), "ones")
        self.beta = ps.param(f"{name}.beta", (dim,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / ag.tsqrt(var + self.eps) * self.gamma + self.beta


class MultiHeadAttention:
    """Scaled dot-product attention over token rows, heads along the channel dim."""

    def __init__(self, ps: ParamStore, name: str, dim: int, heads: int,
                 zero_out: bool = False):
        if dim % heads != 0:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(ps, f"{name}.q", dim, dim)
        self.wk = Linear(ps, f"{name}.k", dim, dim)
        self.wv = Linear(ps, f"{name}.v", dim, dim)
        self.wo = Linear(ps, f"{name}.out", dim, dim, zero_init=zero_out)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor, n: int) -> Tensor:
        return ag.transpose(ag.reshape(x, (n, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        a, b = q.shape[0], k.shape[0]
        qh = self._split(self.wq(q), a)
        kh = self._split(self.wk(k), b)
        vh = self._split(self.wv(v), b)
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = ag.matmul(qh, ag.transpose(kh, (0, 2, 1))) * scale
        attn = ag.softmax_lastdim(scores)
        self.last_weights = attn.data
        out = ag.matmul(attn, vh)
        merged = ag.reshape(ag.transpose(out, (1, 0, 2)), (a, self.dim))
        return self.wo(merged)


class CorrBlock:
    """Attention-based correction: pre-norm cross-attention then a
    feed-forward layer, both residual.

    Output projections are zero-initialized, so a fresh block is exactly the
    identity on its query tokens; interaction starts as a strict refinement.
    """

    def __init__(self, ps: ParamStore, name: str, dim: int, heads: int,
                 ffn_mult: int = 2):
        self.ln_q = LayerNorm(ps, f"{name}.ln_q", dim)
        self.ln_kv = LayerNorm(ps, f"{name}.ln_kv", dim)
        self.attn = MultiHeadAttention(ps, f"{name}.attn", dim, heads, zero_out=True)
        self.ln_ffn = LayerNorm(ps, f"{name}.ln_ffn", dim)
        self.ffn = Mlp(ps, f"{name}.ffn", dim, ffn_mult * dim, dim, zero_last=True)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        kvn = self.ln_kv(kv)
        h = q + self.attn(self.ln_q(q), kvn, kvn)
        return h + self.ffn(self.ln_ffn(h))
