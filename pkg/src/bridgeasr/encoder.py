"""Speech encoder: strided conv waveform frontend + bidirectional transformer.

The conv stack (default kernels (10,3,3,3,3,2,2), strides (5,2,2,2,2,2,2))
turns 16 kHz samples into one frame per 320 samples (20 ms). A small
pre-norm transformer with fixed sinusoidal positions then contextualizes
the frames. The conv frontend is frozen by default; training it tends to
destabilize the joint objective.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .layers import (LayerNorm, Linear, Module, TransformerBlock, key_padding_mask,
                     param, sinusoid_positions)
from .tensor import Tensor


class InputTooShortError(ValueError):
    pass


def conv_stack_out_len(n_samples: int, cfg: EncoderConfig) -> int:
    """Frame count from layer-by-layer valid-conv length arithmetic."""
    n = n_samples
    for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
        if n < k:
            raise InputTooShortError(
                f"input of {n_samples} samples too short for the conv stack; "
                f"minimum is {min_samples(cfg)}"
            )
        n = (n - k) // s + 1
    return n


def min_samples(cfg: EncoderConfig) -> int:
    """Smallest input length that yields one frame (inverse of the length law)."""
    n = 1
    for k, s in zip(reversed(cfg.conv_kernels), reversed(cfg.conv_strides)):
        n = (n - 1) * s + k
    return n


class ConvStack(Module):
    """7-layer strided valid convolution with GELU, waveform -> frames."""

    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        self.kernels = list(cfg.conv_kernels)
        self.strides = list(cfg.conv_strides)
        ws = []
        c_in = 1
        for k, c_out in zip(cfg.conv_kernels, cfg.channels_per_layer):
            # Kaiming-style scale keeps activations alive through the stack.
            std = np.sqrt(2.0 / (c_in * k))
            ws.append(param(rng, (c_out, c_in, k), std=std, dtype=dtype))
            c_in = c_out
        self.weights = ws

    def named_parameters(self, prefix=""):
        base = f"{prefix}." if prefix else ""
        return {f"{base}conv{i}.w": w for i, w in enumerate(self.weights)}

    def __call__(self, x):
        # x: [B, 1, L] (or [1, L]) -> [B, C, T]
        for w, s in zip(self.weights, self.strides):
            x = T.gelu(T.conv1d(x, w, stride=s))
        return x


class SpeechEncoder(Module):
    def __init__(self, rng, cfg: EncoderConfig, dtype=np.float32):
        self.cfg = cfg
        self.conv = ConvStack(rng, cfg, dtype=dtype)
        self.proj = Linear(rng, cfg.channels_per_layer[-1], cfg.d_model, std=0.02, dtype=dtype)
        # The GELU conv chain leaves features orders of magnitude smaller
        # than the unit-amplitude position table; normalize them up front or
        # the positions drown the content.
        self.ln_in = LayerNorm(cfg.d_model, dtype=dtype)
        # Residual branches start at zero: the frame features pass through
        # untouched at init and the attention/FFN paths fade in as they
        # earn gradient, which keeps the conv features' separability intact.
        self.blocks = [
            TransformerBlock(rng, cfg.d_model, cfg.n_heads, cfg.d_ff, out_std=0.0, dtype=dtype)
            for _ in range(cfg.n_layers)
        ]
        self.ln_out = LayerNorm(cfg.d_model, dtype=dtype)
        self._pos_cache = None

    @property
    def frame_shift_samples(self) -> int:
        return self.cfg.total_stride

    def apply_freezes(self):
        if self.cfg.freeze_all:
            self.freeze()
        elif self.cfg.freeze_conv:
            self.conv.freeze()

    def _positions(self, t: int, dtype) -> np.ndarray:
        if self._pos_cache is None or self._pos_cache.shape[0] < t or self._pos_cache.dtype != dtype:
            self._pos_cache = sinusoid_positions(max(t, 64), self.cfg.d_model, dtype=dtype)
        return self._pos_cache[:t]

    def wave_encode(self, waves, lengths=None):
        """Conv frontend only: [B, L] padded samples -> [B, T, d_model].

        Returns (features, frame_lengths). Frames past an utterance's own
        length are padding artifacts and must be masked downstream.
        """
        if isinstance(waves, Tensor):
            x = waves
        else:
            x = Tensor(np.asarray(waves))
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape((1, -1))
        B, L = x.shape
        if lengths is None:
            lengths = [L] * B
        frame_lens = [conv_stack_out_len(int(n), self.cfg) for n in lengths]
        feats = self.conv(x.reshape((B, 1, L)))          # [B, C, T]
        feats = self.ln_in(self.proj(feats.transpose(0, 2, 1)))   # [B, T, d]
        return feats, frame_lens

    def encode(self, feats, frame_lens=None):
        """Contextualize frames bidirectionally; shape-preserving."""
        B, t, _ = feats.shape
        x = T.add_mask(feats, self._positions(t, feats.dtype))
        mask = None
        if frame_lens is not None and any(n != t for n in frame_lens):
            mask = key_padding_mask(frame_lens, t, dtype=feats.data.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_out(x)

    def __call__(self, waves, lengths=None):
        feats, frame_lens = self.wave_encode(waves, lengths)
        return self.encode(feats, frame_lens), frame_lens
