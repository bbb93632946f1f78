"""Minimal numpy layers with hand-written backward passes.

Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names. Each
layer caches what its backward pass needs during ``forward`` and accumulates
parameter gradients into a matching dict during ``backward``. A layer must be
run forward before backward, once per forward.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError

Params = dict


class Layer:
    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def _push(self, cache):
        self._cache = cache

    def _pop(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def param_specs(self) -> dict:
        """Name -> (shape, init kind) for every parameter owned by this layer."""
        return {}

    def children(self) -> list["Layer"]:
        return []

    def all_specs(self) -> dict:
        specs = dict(self.param_specs())
        for c in self.children():
            specs.update(c.all_specs())
        return specs

    def reset(self):
        self._cache = None
        for c in self.children():
            c.reset()


def init_params(specs: dict, rng: np.random.Generator, dtype=np.float32) -> Params:
    params = {}
    for name in sorted(specs):
        shape, kind = specs[name]
        if kind == "zeros":
            v = np.zeros(shape)
        elif kind == "ones":
            v = np.ones(shape)
        elif kind == "embed":
            v = rng.standard_normal(shape) * 0.1
        elif kind == "linear":
            v = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            raise ValueError(f"unknown init {kind}")
        params[name] = v.astype(dtype)
    return params


def _acc(grads: Params, key: str, value: np.ndarray):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.astype(value.dtype, copy=True)


class Linear(Layer):
    def __init__(self, name, din, dout):
        super().__init__(name)
        self.din, self.dout = din, dout
        self.w, self.b = f"{name}.weight", f"{name}.bias"

    def param_specs(self):
        return {self.w: ((self.din, self.dout), "linear"), self.b: ((self.dout,), "zeros")}

    def forward(self, P, x):
        if x.shape[-1] != self.din:
            raise ShapeError(f"{self.name}: expected last dim {self.din}, got {x.shape}")
        self._push(x)
        return x @ P[self.w] + P[self.b]

    def backward(self, P, G, dy):
        x = self._pop()
        x2 = x.reshape(-1, self.din)
        dy2 = dy.reshape(-1, self.dout)
        _acc(G, self.w, x2.T @ dy2)
        _acc(G, self.b, dy2.sum(axis=0))
        return dy @ P[self.w].T


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


class LayerNorm(Layer):
    def __init__(self, name, dim, eps=1e-5):
        super().__init__(name)
        self.dim, self.eps = dim, eps
        self.g, self.b = f"{name}.gamma", f"{name}.beta"

    def param_specs(self):
        return {self.g: ((self.dim,), "ones"), self.b: ((self.dim,), "zeros")}

    def forward(self, P, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last dim {self.dim}, got {x.shape}")
        y, cache = layer_norm_forward(x, P[self.g], P[self.b], self.eps)
        self._push(cache)
        return y

    def backward(self, P, G, dy):
        xhat, inv = self._pop()
        _acc(G, self.g, (dy * xhat).reshape(-1, self.dim).sum(axis=0))
        _acc(G, self.b, dy.reshape(-1, self.dim).sum(axis=0))
        dxhat = dy * P[self.g]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


class GELU(Layer):
    """Tanh approximation of the gaussian-error linear unit."""

    def forward(self, P, x):
        u = _GELU_C * x * (1.0 + 0.044715 * x * x)
        th = np.tanh(u)
        self._push((x, th))
        return 0.5 * x * (1.0 + th)

    def backward(self, P, G, dy):
        x, th = self._pop()
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


class Tanh(Layer):
    def forward(self, P, x):
        y = np.tanh(x)
        self._push(y)
        return y

    def backward(self, P, G, dy):
        y = self._pop()
        return dy * (1.0 - y * y)


class Dropout(Layer):
    def __init__(self, name, p):
        super().__init__(name)
        self.p = p

    def forward(self, P, x, rng: Optional[np.random.Generator] = None):
        if rng is None or self.p == 0.0:
            self._push((None,))
            return x
        keep = (rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        self._push((keep,))
        return x * keep

    def backward(self, P, G, dy):
        (keep,) = self._pop()
        return dy if keep is None else dy * keep


class Embedding(Layer):
    def __init__(self, name, n, dim):
        super().__init__(name)
        self.n, self.dim = n, dim
        self.w = f"{name}.weight"

    def param_specs(self):
        return {self.w: ((self.n, self.dim), "embed")}

    def forward(self, P, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            raise ShapeError(f"{self.name}: index out of range [0, {self.n})")
        self._push(ids)
        return P[self.w][ids]

    def backward(self, P, G, dy):
        ids = self._pop()
        g = np.zeros_like(P[self.w])
        np.add.at(g, ids.ravel(), dy.reshape(-1, self.dim))
        _acc(G, self.w, g)
        return None


class MultiHeadAttention(Layer):
    """Scaled dot-product attention of queries ``x`` over a context ``ctx``."""

    def __init__(self, name, dim, heads):
        super().__init__(name)
        if dim % heads:
            raise ShapeError(f"hidden {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.dh = dim, heads, dim // heads
        self.q = Linear(f"{name}.query", dim, dim)
        self.k = Linear(f"{name}.key", dim, dim)
        self.v = Linear(f"{name}.value", dim, dim)
        self.o = Linear(f"{name}.out", dim, dim)

    def children(self):
        return [self.q, self.k, self.v, self.o]

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, t):
        b, h, n, d = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def forward(self, P, x, ctx, key_mask=None):
        q = self._split(self.q.forward(P, x))
        k = self._split(self.k.forward(P, ctx))
        v = self._split(self.v.forward(P, ctx))
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(self.dh)
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, np.asarray(-1e9, scores.dtype))
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        out = self._merge(att @ v)
        self._push((q, k, v, att))
        return self.o.forward(P, out)

    def backward(self, P, G, dy):
        """Returns (d queries input, d context input)."""
        q, k, v, att = self._pop()
        dout = self._split(self.o.backward(P, G, dy))
        datt = dout @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dout
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(self.dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dx = self.q.backward(P, G, self._merge(dq))
        dctx = self.k.backward(P, G, self._merge(dk)) + self.v.backward(P, G, self._merge(dv))
        return dx, dctx


class FeedForward(Layer):
    def __init__(self, name, dim, inner):
        super().__init__(name)
        self.fc1 = Linear(f"{name}.fc1", dim, inner)
        self.act = GELU(f"{name}.act")
        self.fc2 = Linear(f"{name}.fc2", inner, dim)

    def children(self):
        return [self.fc1, self.act, self.fc2]

    def forward(self, P, x):
        return self.fc2.forward(P, self.act.forward(P, self.fc1.forward(P, x)))

    def backward(self, P, G, dy):
        return self.fc1.backward(P, G, self.act.backward(P, G, self.fc2.backward(P, G, dy)))


class AttentionBlock(Layer):
    """Post-norm residual attention: ``LN(x + Attn(x, ctx))``."""

    def __init__(self, name, dim, heads, self_attention=True):
        super().__init__(name)
        self.self_attention = self_attention
        self.att = MultiHeadAttention(f"{name}.att", dim, heads)
        self.ln = LayerNorm(f"{name}.ln", dim)

    def children(self):
        return [self.att, self.ln]

    def forward(self, P, x, ctx=None, key_mask=None):
        ctx = x if self.self_attention else ctx
        return self.ln.forward(P, x + self.att.forward(P, x, ctx, key_mask))

    def backward(self, P, G, dy):
        """Returns dx for self-attention, (dx, dctx) for cross-attention."""
        dres = self.ln.backward(P, G, dy)
        dx, dctx = self.att.backward(P, G, dres)
        if self.self_attention:
            return dres + dx + dctx
        return dres + dx, dctx


class FFNBlock(Layer):
    def __init__(self, name, dim, inner):
        super().__init__(name)
        self.ff = FeedForward(f"{name}.ff", dim, inner)
        self.ln = LayerNorm(f"{name}.ln", dim)

    def children(self):
        return [self.ff, self.ln]

    def forward(self, P, x):
        return self.ln.forward(P, x + self.ff.forward(P, x))

    def backward(self, P, G, dy):
        dres = self.ln.backward(P, G, dy)
        return dres + self.ff.backward(P, G, dres)


class EncoderLayer(Layer):
    def __init__(self, name, dim, heads, inner):
        super().__init__(name)
        self.att = AttentionBlock(f"{name}.self", dim, heads)
        self.ffn = FFNBlock(f"{name}.ffn", dim, inner)

    def children(self):
        return [self.att, self.ffn]

    def forward(self, P, x, mask=None):
        return self.ffn.forward(P, self.att.forward(P, x, key_mask=mask))

    def backward(self, P, G, dy):
        return self.att.backward(P, G, self.ffn.backward(P, G, dy))


class CrossLayer(Layer):
    """Two-stream layer: mutual cross-attention, then per-stream self-attention and FFN."""

    def __init__(self, name, dim, heads, inner):
        super().__init__(name)
        self.l_cross = AttentionBlock(f"{name}.lang_cross", dim, heads, self_attention=False)
        self.v_cross = AttentionBlock(f"{name}.vis_cross", dim, heads, self_attention=False)
        self.l_self = EncoderLayer(f"{name}.lang", dim, heads, inner)
        self.v_self = EncoderLayer(f"{name}.vis", dim, heads, inner)

    def children(self):
        return [self.l_cross, self.v_cross, self.l_self, self.v_self]

    def forward(self, P, lang, vis, lang_mask):
        l1 = self.l_cross.forward(P, lang, vis)
        v1 = self.v_cross.forward(P, vis, lang, key_mask=lang_mask)
        return self.l_self.forward(P, l1, lang_mask), self.v_self.forward(P, v1)

    def backward(self, P, G, dlang, dvis):
        dl1 = self.l_self.backward(P, G, dlang)
        dv1 = self.v_self.backward(P, G, dvis)
        dvis_in, dlang_ctx = self.v_cross.backward(P, G, dv1)
        dlang_in, dvis_ctx = self.l_cross.backward(P, G, dl1)
        return dlang_in + dlang_ctx, dvis_in + dvis_ctx


class Head(Layer):
    """``Dense -> Activation -> LayerNorm -> Dropout -> Dense``."""

    def __init__(self, name, din, hidden, dout, dropout_p=0.0):
        super().__init__(name)
        self.fc1 = Linear(f"{name}.dense", din, hidden)
        self.act = GELU(f"{name}.act")
        self.ln = LayerNorm(f"{name}.ln", hidden)
        self.drop = Dropout(f"{name}.drop", dropout_p)
        self.fc2 = Linear(f"{name}.out", hidden, dout)

    def children(self):
        return [self.fc1, self.act, self.ln, self.drop, self.fc2]

    def forward(self, P, x, rng=None):
        h = self.ln.forward(P, self.act.forward(P, self.fc1.forward(P, x)))
        return self.fc2.forward(P, self.drop.forward(P, h, rng))

    def backward(self, P, G, dy):
        d = self.drop.backward(P, G, self.fc2.backward(P, G, dy))
        return self.fc1.backward(P, G, self.act.backward(P, G, self.ln.backward(P, G, d)))
