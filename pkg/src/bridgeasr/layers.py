"""Building blocks shared by the speech encoder and the decoder LM."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e30  # additive mask value; large but finite keeps f32 happy


class Module:
    """Minimal parameter container: children discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(rng, shape, std=0.02, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, std=0.02, zero=False, dtype=np.float32):
        if zero:
            self.w = Tensor(np.zeros((d_in, d_out), dtype=dtype), requires_grad=True)
        else:
            self.w = param(rng, (d_in, d_out), std=std, dtype=dtype)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        lead = x.shape[:-1]
        d_in = x.shape[-1]
        flat = x.reshape((-1, d_in)) if x.ndim != 2 else x
        y = T.matmul(flat, self.w) + self.b
        if x.ndim != 2:
            y = y.reshape(lead + (self.w.shape[1],))
        return y


class Conv1d(Module):
    """Valid 1-D convolution module with a fixed stride."""

    def __init__(self, rng, c_in, c_out, kernel, stride, std=None, dtype=np.float32):
        if std is None:
            std = float(np.sqrt(2.0 / (c_in * kernel)))
        self.w = param(rng, (c_out, c_in, kernel), std=std, dtype=dtype)
        self.stride = stride

    def __call__(self, x):
        return T.conv1d(x, self.w, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32):
        self.g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)


class MultiHeadAttention(Module):
    """Standard multi-head attention over [B, T, d] inputs.

    `mask` is an additive numpy array broadcastable to [B, H, Tq, Tk].
    `rope` (positions array) turns on rotary rotation of q and k.
    """

    def __init__(self, rng, d_model, n_heads, out_std=0.02, rotary_fraction=0.0, dtype=np.float32):
        self.wq = Linear(rng, d_model, d_model, dtype=dtype)
        self.wk = Linear(rng, d_model, d_model, dtype=dtype)
        self.wv = Linear(rng, d_model, d_model, dtype=dtype)
        self.wo = Linear(rng, d_model, d_model, std=out_std, dtype=dtype)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        rd = int(self.d_head * rotary_fraction)
        self.rot_dims = rd - (rd % 2)

    def _split(self, x, B, Tn):
        # [B, T, d] -> [B, H, T, dh]
        return x.reshape((B, Tn, self.n_heads, self.d_head)).transpose(0, 2, 1, 3)

    def __call__(self, x, mask=None, rope=None, cache=None):
        B, Tn, d = x.shape
        q = self._split(self.wq(x), B, Tn)
        k = self._split(self.wk(x), B, Tn)
        v = self._split(self.wv(x), B, Tn)
        if rope is not None:
            q = T.rotate_pairs(q, rope, rot_dims=self.rot_dims)
            k = T.rotate_pairs(k, rope, rot_dims=self.rot_dims)
        if cache is not None:
            # Incremental decoding: append this step's k/v and attend to all.
            k_np = np.concatenate([cache.k, k.data], axis=2) if cache.k is not None else k.data
            v_np = np.concatenate([cache.v, v.data], axis=2) if cache.v is not None else v.data
            cache.k, cache.v = k_np, v_np
            k, v = Tensor(k_np), Tensor(v_np)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = T.add_mask(scores, mask)
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, v)                                   # [B, H, Tq, dh]
        merged = ctx.transpose(0, 2, 1, 3).reshape((B, Tn, d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, rng, d_model, d_ff, out_std=0.02, dtype=np.float32):
        self.w1 = Linear(rng, d_model, d_ff, dtype=dtype)
        self.w2 = Linear(rng, d_ff, d_model, std=out_std, dtype=dtype)

    def __call__(self, x):
        return self.w2(T.gelu(self.w1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + ffn(LN(x))."""

    def __init__(self, rng, d_model, n_heads, d_ff, out_std=0.02, rotary_fraction=0.0, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = MultiHeadAttention(rng, d_model, n_heads, out_std=out_std,
                                       rotary_fraction=rotary_fraction, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.ffn = FeedForward(rng, d_model, d_ff, out_std=out_std, dtype=dtype)

    def __call__(self, x, mask=None, rope=None, cache=None):
        x = x + self.attn(self.ln1(x), mask=mask, rope=rope, cache=cache)
        return x + self.ffn(self.ln2(x))


def sinusoid_positions(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table [n, d]."""
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    ang = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe.astype(dtype)


def key_padding_mask(lengths, t_max: int, dtype=np.float32) -> np.ndarray:
    """[B, 1, 1, T] additive mask banning attention to padded key frames."""
    lengths = np.asarray(lengths)
    cols = np.arange(t_max)[None, :]
    banned = cols >= lengths[:, None]
    m = np.where(banned, NEG_INF, 0.0).astype(dtype)
    return m[:, None, None, :]


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """[T, T] additive mask: position t sees positions <= t."""
    m = np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)
    return m
