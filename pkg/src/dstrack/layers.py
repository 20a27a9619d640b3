"""Parameterized building blocks: linear, LSTM cell, transformer layer."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor


class Linear:
    def __init__(self, ps: ParamSet, prefix: str, out_dim: int, in_dim: int, bias: bool = True):
        self.w = ps.param(f"{prefix}.w", (out_dim, in_dim))
        self.b = ps.param(f"{prefix}.b", (out_dim, 1), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:  # (in, N) -> (out, N)
        y = ad.matmul(self.w, x)
        return ad.add(y, self.b) if self.b is not None else y


class LSTMCell:
    """Gates packed as [input; forget; output; candidate] rows."""

    def __init__(self, ps: ParamSet, prefix: str, input_dim: int, hidden_dim: int):
        self.hidden = hidden_dim
        self.wx = ps.param(f"{prefix}.wx", (4 * hidden_dim, input_dim))
        self.wh = ps.param(f"{prefix}.wh", (4 * hidden_dim, hidden_dim))
        self.b = ps.param(f"{prefix}.b", (4 * hidden_dim, 1), init="zeros")

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        g = ad.add(ad.add(ad.matmul(self.wx, x), ad.matmul(self.wh, h)), self.b)
        hd = self.hidden
        i = ad.sigmoid(ad.narrow(g, 0, 0, hd))
        f = ad.sigmoid(ad.narrow(g, 0, hd, hd))
        o = ad.sigmoid(ad.narrow(g, 0, 2 * hd, hd))
        u = ad.tanh(ad.narrow(g, 0, 3 * hd, hd))
        c2 = ad.add(ad.mul(f, c), ad.mul(i, u))
        h2 = ad.mul(o, ad.tanh(c2))
        return h2, c2


class LayerNorm:
    def __init__(self, ps: ParamSet, prefix: str, dim: int):
        self.gain = ps.param(f"{prefix}.gain", (dim, 1), init="zeros")
        self.gain.data += 1.0
        self.bias = ps.param(f"{prefix}.bias", (dim, 1), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class TransformerLayer:
    """Post-norm self-attention block over a (hidden, N) sequence."""

    def __init__(self, ps: ParamSet, prefix: str, hidden: int, heads: int, ffn_dim: int):
        if hidden % heads:
            raise ValueError(f"hidden {hidden} not divisible by heads {heads}")
        self.hidden = hidden
        self.heads = heads
        self.head_dim = hidden // heads
        self.wq = Linear(ps, f"{prefix}.attn.q", hidden, hidden)
        self.wk = Linear(ps, f"{prefix}.attn.k", hidden, hidden)
        self.wv = Linear(ps, f"{prefix}.attn.v", hidden, hidden)
        self.wo = Linear(ps, f"{prefix}.attn.out", hidden, hidden)
        self.ln1 = LayerNorm(ps, f"{prefix}.ln1", hidden)
        self.ffn1 = Linear(ps, f"{prefix}.ffn.in", ffn_dim, hidden)
        self.ffn2 = Linear(ps, f"{prefix}.ffn.out", hidden, ffn_dim)
        self.ln2 = LayerNorm(ps, f"{prefix}.ln2", hidden)

    def __call__(self, x: Tensor, dropout_p: float, rng: np.random.Generator, training: bool) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for head in range(self.heads):
            off = head * self.head_dim
            qs = ad.narrow(q, 0, off, self.head_dim)
            ks = ad.narrow(k, 0, off, self.head_dim)
            vs = ad.narrow(v, 0, off, self.head_dim)
            scores = ad.scale(ad.matmul(ad.transpose(qs), ks), scale)  # (N, N)
            attn = ad.softmax(scores, axis=1)
            outs.append(ad.matmul(vs, ad.transpose(attn)))  # (head_dim, N)
        merged = self.wo(ad.concat(outs, axis=0))
        merged = ad.dropout(merged, dropout_p, rng, training)
        x = self.ln1(ad.add(x, merged))
        f = self.ffn2(ad.relu(self.ffn1(x)))
        f = ad.dropout(f, dropout_p, rng, training)
        return self.ln2(ad.add(x, f))


class SequenceEmbedder:
    """Token + position + segment embeddings, summed columnwise."""

    def __init__(self, ps: ParamSet, prefix: str, vocab_size: int, hidden: int, max_len: int):
        self.max_len = max_len
        self.tok = ps.param(f"{prefix}.tok", (vocab_size, hidden))
        self.pos = ps.param(f"{prefix}.pos", (max_len, hidden))
        self.seg = ps.param(f"{prefix}.seg", (2, hidden))

    def __call__(self, token_ids, segment_ids) -> Tensor:  # -> (hidden, N)
        n = len(token_ids)
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.max_len}")
        e = ad.embedding(self.tok, token_ids)
        e = ad.add(e, ad.embedding(self.pos, np.arange(n)))
        return ad.add(e, ad.embedding(self.seg, segment_ids))
