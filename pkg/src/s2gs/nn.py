"""Small trainable building blocks shared by the encoder and decoder stacks."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    def __init__(self, d_in, d_out, rng, zero_init=False, bias_init=None):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = uniform_init(rng, (d_in, d_out), d_in)
        b = np.zeros(d_out, dtype=np.float32)
        if bias_init is not None:
            b[:] = np.asarray(bias_init, dtype=np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
        normed = ad.div(centered, ad.tsqrt(ad.add(var, self.eps)))
        return ad.add(ad.mul(normed, self.gamma), self.beta)

    def params(self, prefix=""):
        return {prefix + "gamma": self.gamma, prefix + "beta": self.beta}


class MultiHeadAttention:
    """Scaled dot-product attention over merged-head [tokens, dim] inputs."""

    def __init__(self, dim, n_heads, rng):
        assert dim % n_heads == 0
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x, n):
        # [n, dim] -> [heads, n, head_dim]
        return ad.transpose(ad.reshape(x, (n, self.n_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, queries, context, mask=None):
        """Attend queries [Nq, dim] over context [Nk, dim].

        ``mask`` is an additive [Nq, Nk] array of {0, -inf sentinel}.
        """
        nq, nk = queries.shape[0], context.shape[0]
        q = self._split(self.wq(queries), nq)
        k = self._split(self.wk(context), nk)
        v = self._split(self.wv(context), nk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        if mask is None:
            attn = ad.softmax(scores)
        else:
            attn = ad.softmax_masked(scores, mask)
        mixed = ad.matmul(attn, v)  # [heads, Nq, head_dim]
        merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (nq, self.dim))
        return self.wo(merged)

    def params(self, prefix=""):
        out = {}
        for name, sub in (("q.", self.wq), ("k.", self.wk), ("v.", self.wv), ("o.", self.wo)):
            out.update(sub.params(prefix + name))
        return out


class FeedForward:
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self, prefix=""):
        return {**self.fc1.params(prefix + "fc1."), **self.fc2.params(prefix + "fc2.")}


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)); x + ff(ln(x))."""

    def __init__(self, dim, n_heads, hidden, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, mask))
        return ad.add(x, self.ff(self.ln2(x)))

    def params(self, prefix=""):
        out = {}
        out.update(self.ln1.params(prefix + "ln1."))
        out.update(self.attn.params(prefix + "attn."))
        out.update(self.ln2.params(prefix + "ln2."))
        out.update(self.ff.params(prefix + "ff."))
        return out


def sincos_grid(rows, cols, dim):
    """Fixed 2D sinusoidal positional table, [rows*cols, dim], row-major."""
    assert dim % 4 == 0
    quarter = dim // 4
    freqs = np.exp(-math.log(100.0) * np.arange(quarter) / max(quarter - 1, 1))
    ys = np.linspace(0.0, 1.0, rows, endpoint=False) + 0.5 / rows
    xs = np.linspace(0.0, 1.0, cols, endpoint=False) + 0.5 / cols
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    ang_y = gy.reshape(-1, 1) * freqs * 2.0 * math.pi * rows
    ang_x = gx.reshape(-1, 1) * freqs * 2.0 * math.pi * cols
    table = np.concatenate([np.sin(ang_y), np.cos(ang_y), np.sin(ang_x), np.cos(ang_x)], axis=1)
    return table.astype(np.float32)


def bilinear_matrix(n_out, n_in):
    """1D bilinear interpolation matrix [n_out, n_in] over pixel centers."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        lo = int(math.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def upsample_bilinear(x, rows_out, cols_out):
    """Bilinearly upsample [..., rows, cols] tensors via interpolation matmuls."""
    rows_in, cols_in = x.shape[-2], x.shape[-1]
    up_r = bilinear_matrix(rows_out, rows_in)
    up_c = bilinear_matrix(cols_out, cols_in).T
    return ad.matmul(ad.matmul(Tensor(up_r), x), Tensor(up_c))
