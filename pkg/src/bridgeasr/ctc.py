"""CTC branch: projection head, exact alignment loss, frame labeling.

The loss is the alpha (forward) recursion over the blank-interleaved
target, run in log space on the autodiff tape, so gradients come from the
tape rather than a hand-derived beta pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import Tensor


class InfeasibleAlignmentError(ValueError):
    """Too few frames to emit the target at all."""


class CtcHead(Module):
    """Linear projection to log-probabilities over vocab + blank."""

    def __init__(self, rng, d_model, ctc_size, dtype=np.float32):
        self.proj = Linear(rng, d_model, ctc_size, dtype=dtype)

    def __call__(self, feats):
        return T.log_softmax(self.proj(feats), axis=-1)


def min_frames(target) -> int:
    """Fewest frames that can realize `target` (repeats need a blank)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: Tensor, target, blank: int) -> Tensor:
    """Negative log-probability of `target` summed over all alignments.

    log_probs: [T, V+1] rows of log-probabilities (blank last). The
    recursion walks the extended sequence [blank, y1, blank, ..., yN, blank].
    """
    t_frames = log_probs.shape[0]
    target = [int(y) for y in target]
    if any(y == blank for y in target):
        raise ValueError("target must not contain the blank id")
    if t_frames < min_frames(target):
        raise InfeasibleAlignmentError(
            f"{t_frames} frames cannot realize a target of length {len(target)} "
            f"(needs at least {min_frames(target)})"
        )
    ext = [blank]
    for y in target:
        ext.extend([y, blank])
    s = len(ext)
    ext_ids = np.asarray(ext, dtype=np.int64)
    dtype = log_probs.data.dtype
    neg_inf = Tensor(np.full(1, -np.inf, dtype=dtype))
    neg_inf2 = Tensor(np.full(2, -np.inf, dtype=dtype))
    # alpha[s-2] may not merge into alpha[s] when ext[s] is blank or repeats
    # ext[s-2]; ban those transitions with an additive -inf mask.
    skip_ban = np.zeros(s, dtype=dtype)
    for i in range(s):
        if i < 2 or ext[i] == blank or ext[i] == ext[i - 2]:
            skip_ban[i] = -np.inf

    emit = log_probs[0][ext_ids]
    start_mask = np.full(s, -np.inf, dtype=dtype)
    start_mask[0] = 0.0
    if s > 1:
        start_mask[1] = 0.0
    alpha = T.add_mask(emit, start_mask)
    for t in range(1, t_frames):
        prev1 = T.concat([neg_inf, alpha[:-1]]) if s > 1 else alpha
        stay = T.logaddexp(alpha, prev1) if s > 1 else alpha
        if s > 2:
            prev2 = T.add_mask(T.concat([neg_inf2, alpha[:-2]]), skip_ban)
            stay = T.logaddexp(stay, prev2)
        alpha = stay + log_probs[t][ext_ids]
    total = alpha[-1:] if s == 1 else T.logaddexp(alpha[-1:], alpha[-2:-1])
    return -total.reshape(())


def ctc_loss_batch(log_probs_list, targets, blank: int) -> Tensor:
    """Mean per-utterance CTC loss over a batch."""
    losses = [ctc_loss(lp, y, blank) for lp, y in zip(log_probs_list, targets)]
    return T.stack(losses).mean()


def ctc_frame_labels(log_probs) -> np.ndarray:
    """Per-frame argmax labels; ties break toward the smallest id."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return np.argmax(data, axis=-1)


def ctc_collapse(labels, blank: int) -> list[int]:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for lab in labels:
        lab = int(lab)
        if lab != prev:
            if lab != blank:
                out.append(lab)
            prev = lab
    return out
