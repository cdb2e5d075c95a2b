"""Decoder-only causal transformer with rotary position embeddings.

Consumes a speech prompt (already in embedding space) followed by BOS and
text embeddings; logits at row t score the token at t+1. Input embedding
and output projection are separate tables (not tied).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LmConfig
from .layers import LayerNorm, Linear, Module, TransformerBlock, causal_mask, param
from .tensor import Tensor


class ContextOverflowError(ValueError):
    pass


def rotary_apply(q: Tensor, k: Tensor, positions, base=10000.0, rot_dims=None):
    """Rotate q and k dimension pairs (2i, 2i+1) by angle pos * theta_i.

    theta_i = base^(-2i/d_head); attention dot products between rotated
    vectors depend only on position differences.
    """
    if q.shape[-1] % 2 != 0:
        raise ValueError(f"rotary needs an even head dim, got {q.shape[-1]}")
    return (
        T.rotate_pairs(q, positions, base=base, rot_dims=rot_dims),
        T.rotate_pairs(k, positions, base=base, rot_dims=rot_dims),
    )


@dataclass
class PromptedInput:
    """Embedded LM input: prompt vectors then BOS then text embeddings."""

    embeddings: Tensor            # [M+1+I, d_lm]
    loss_mask: np.ndarray         # bool [M+1+I]; True on rows whose logits are scored
    targets: np.ndarray           # int [M+1+I]; valid where loss_mask


class KVCache:
    """Single-owner per-layer key/value store for incremental decoding."""

    def __init__(self, n_layers):
        self.layers = [_LayerCache() for _ in range(n_layers)]
        self.length = 0

    def clone(self):
        c = KVCache(len(self.layers))
        c.length = self.length
        for src, dst in zip(self.layers, c.layers):
            dst.k = None if src.k is None else src.k.copy()
            dst.v = None if src.v is None else src.v.copy()
        return c


class _LayerCache:
    __slots__ = ("k", "v")

    def __init__(self):
        self.k = None
        self.v = None


class DecoderLm(Module):
    def __init__(self, rng, cfg: LmConfig, dtype=np.float32):
        self.cfg = cfg
        self.embed = param(rng, (cfg.vocab_size, cfg.d_model), std=0.02, dtype=dtype)
        out_std = 0.02
        self.blocks = [
            TransformerBlock(rng, cfg.d_model, cfg.n_heads, cfg.d_ff,
                             out_std=out_std, rotary_fraction=cfg.rotary_fraction, dtype=dtype)
            for _ in range(cfg.n_layers)
        ]
        self.ln_out = LayerNorm(cfg.d_model, dtype=dtype)
        self.head = Linear(rng, cfg.d_model, cfg.vocab_size, dtype=dtype)

    # -- training-path forward ------------------------------------------------

    def assemble_prompt(self, prompt, text_ids, vocab, training: bool) -> PromptedInput:
        """Build [s_1..s_M, emb(BOS), emb(y_1)..emb(y_I)] plus targets/mask.

        Targets are [y_1..y_I, EOS] on rows M..M+I; prompt rows are masked
        out of the loss.
        """
        m = prompt.shape[0]
        text_ids = [int(y) for y in text_ids]
        if training and m == 0 and len(text_ids) == 0:
            raise ValueError("degenerate training input: empty prompt and empty text")
        ids = [vocab.bos_id] + text_ids
        emb = T.embedding(self.embed, np.asarray(ids, dtype=np.int64))
        seq = T.concat([prompt, emb], axis=0) if m > 0 else emb
        n = m + 1 + len(text_ids)
        mask = np.zeros(n, dtype=bool)
        mask[m:] = True
        targets = np.full(n, -1, dtype=np.int64)
        targets[m:] = text_ids + [vocab.eos_id]
        return PromptedInput(embeddings=seq, loss_mask=mask, targets=targets)

    def forward(self, x, lengths=None):
        """Causal forward over embedded input [B, L, d] (or [L, d]).

        Returns logits of the same leading shape over the vocabulary.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        B, L, _ = x.shape
        if L > self.cfg.max_positions:
            raise ContextOverflowError(
                f"sequence length {L} exceeds max positions {self.cfg.max_positions}"
            )
        mask = causal_mask(L, dtype=x.data.dtype)
        rope = np.arange(L)
        for blk in self.blocks:
            x = blk(x, mask=mask, rope=rope)
        logits = self.head(self.ln_out(x))
        return logits[0] if squeeze else logits

    def __call__(self, x, lengths=None):
        return self.forward(x, lengths)

    # -- incremental decoding path ---------------------------------------------

    def start_cache(self) -> KVCache:
        return KVCache(len(self.blocks))

    def forward_step(self, x, cache: KVCache):
        """Extend the cache with rows [n, d] and return the last row's logits."""
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        n = x.shape[1]
        if cache.length + n > self.cfg.max_positions:
            raise ContextOverflowError(
                f"sequence length {cache.length + n} exceeds max positions "
                f"{self.cfg.max_positions}"
            )
        rope = np.arange(cache.length, cache.length + n)
        # New rows may attend to everything cached plus themselves causally.
        past = cache.length
        mask = np.concatenate(
            [np.zeros((n, past), dtype=x.data.dtype), causal_mask(n, dtype=x.data.dtype)],
            axis=1,
        )
        for blk, layer_cache in zip(self.blocks, cache.layers):
            x = blk(x, mask=mask, rope=rope, cache=layer_cache)
        cache.length += n
        logits = self.head(self.ln_out(x[:, -1]))
        return logits[0]

    def embed_ids(self, ids):
        return T.embedding(self.embed, np.asarray(ids, dtype=np.int64))


def lm_loss(logits, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    logits [..., L, V]; targets/loss_mask [..., L]. At least one position
    must be masked in.
    """
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    n = int(loss_mask.sum())
    if n < 1:
        raise ValueError("loss mask selects no positions")
    v = logits.shape[-1]
    flat = logits.reshape((-1, v))
    logp = T.log_softmax(flat, axis=-1)
    idx = np.nonzero(loss_mask.reshape(-1))[0]
    picked = logp[(idx, targets.reshape(-1)[idx])]
    return -(picked.sum() / n)
