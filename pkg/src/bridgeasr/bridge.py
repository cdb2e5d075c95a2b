"""Bridge network: compress encoder frames into LM-space prompt vectors.

Three modes: fixed-rate downsampling (two stride-2 convs with a GELU
between), dropping blank-labeled frames, or averaging maximal runs of
identically-labeled frames (blank runs dropped). Each mode ends in its
own affine projection into the LM embedding width; no nonlinearity after
the projection.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import InputTooShortError
from .layers import Conv1d, Linear, Module

BRIDGE_MODES = ("downsample", "ctc_remove", "ctc_average")

_K, _S = 4, 2  # two stride-2 convs: a quarter of the original length


def downsample_out_len(t: int) -> int:
    """M for T input frames under two valid K=4, S=2 convolutions."""
    if t < min_frames_downsample():
        raise InputTooShortError(
            f"downsample bridge needs T >= {min_frames_downsample()}, got {t}"
        )
    t1 = (t - _K) // _S + 1
    return (t1 - _K) // _S + 1


def min_frames_downsample() -> int:
    # The second conv needs 4 inputs, so the first must see (4-1)*2+4 frames.
    return (_K - 1) * _S + _K


def segment_runs(labels):
    """Maximal runs of equal labels as (label, start, end), end exclusive."""
    labels = [int(x) for x in labels]
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((labels[start], start, i))
            start = i
    return runs


class DownsampleBridge(Module):
    mode = "downsample"
    needs_ctc = False

    def __init__(self, rng, d_model, d_lm, dtype=np.float32):
        self.conv1 = Conv1d(rng, d_model, d_model, _K, _S, dtype=dtype)
        self.conv2 = Conv1d(rng, d_model, d_model, _K, _S, dtype=dtype)
        # Start both convs near per-channel mean pooling: prompts then begin
        # as smooth local averages of the frame features, which trains far
        # faster than a random channel mixture at this scale.
        for conv in (self.conv1, self.conv2):
            w = np.zeros((d_model, d_model, _K), dtype=dtype)
            w[np.arange(d_model), np.arange(d_model), :] = 1.0 / _K
            w += rng.normal(0.0, 0.02, size=w.shape).astype(dtype)
            conv.w.data = w
        self.proj = Linear(rng, d_model, d_lm, dtype=dtype)

    def compress_one(self, feats_b, labels_b=None, blank=None):
        x = feats_b.transpose(1, 0).reshape((1, feats_b.shape[1], feats_b.shape[0]))
        m = downsample_out_len(feats_b.shape[0])
        h = self.conv2(T.gelu(self.conv1(x)))          # [1, d, M]
        return self.proj(h[0].transpose(1, 0)[:m])

    def __call__(self, feats, frame_lens, labels=None, blank=None):
        """[B, T, d] padded frames -> list of [M_b, d_lm] prompts."""
        x = feats.transpose(0, 2, 1)
        h = self.conv2(T.gelu(self.conv1(x))).transpose(0, 2, 1)   # [B, M_max, d]
        return [self.proj(h[b, :downsample_out_len(t_b)]) for b, t_b in enumerate(frame_lens)]


class CtcRemoveBridge(Module):
    mode = "ctc_remove"
    needs_ctc = True

    def __init__(self, rng, d_model, d_lm, dtype=np.float32):
        self.proj = Linear(rng, d_model, d_lm, dtype=dtype)

    def compress_one(self, feats_b, labels_b=None, blank=None):
        """Keep frames labeled non-blank, in order; M = count kept."""
        labs = np.asarray([int(x) for x in labels_b])
        if labs.shape[0] != feats_b.shape[0]:
            raise ValueError(f"{labs.shape[0]} labels for {feats_b.shape[0]} frames")
        keep = np.nonzero(labs != blank)[0]
        return self.proj(feats_b[keep])

    def __call__(self, feats, frame_lens, labels=None, blank=None):
        return [
            self.compress_one(feats[b, :t_b], labels[b][:t_b], blank)
            for b, t_b in enumerate(frame_lens)
        ]


class CtcAverageBridge(Module):
    mode = "ctc_average"
    needs_ctc = True

    def __init__(self, rng, d_model, d_lm, dtype=np.float32):
        self.proj = Linear(rng, d_model, d_lm, dtype=dtype)

    def compress_one(self, feats_b, labels_b=None, blank=None):
        """Mean over each maximal non-blank run; blank runs vanish."""
        labs = [int(x) for x in labels_b]
        if len(labs) != feats_b.shape[0]:
            raise ValueError(f"{len(labs)} labels for {feats_b.shape[0]} frames")
        means = []
        for lab, start, end in segment_runs(labs):
            if lab == blank:
                continue
            means.append(feats_b[start:end].mean(axis=0, keepdims=True))
        if not means:
            return self.proj(feats_b[:0])
        return self.proj(T.concat(means, axis=0))

    def __call__(self, feats, frame_lens, labels=None, blank=None):
        return [
            self.compress_one(feats[b, :t_b], labels[b][:t_b], blank)
            for b, t_b in enumerate(frame_lens)
        ]


def make_bridge(rng, mode: str, d_model: int, d_lm: int, dtype=np.float32):
    if mode == "downsample":
        return DownsampleBridge(rng, d_model, d_lm, dtype=dtype)
    if mode == "ctc_remove":
        return CtcRemoveBridge(rng, d_model, d_lm, dtype=dtype)
    if mode == "ctc_average":
        return CtcAverageBridge(rng, d_model, d_lm, dtype=dtype)
    raise ValueError(f"unknown bridge mode {mode!r}")
