"""Autoregressive decoding: greedy, beam, top-k and nucleus sampling.

Strategies drive a session object exposing `begin() -> (logprobs, state)`
and `extend(state, token) -> (logprobs, state)` plus an `eos_id`. Scores
are unnormalized joint log-probabilities. An EOS extension finishes a
hypothesis; finished hypotheses keep competing for beam slots on their
final score but are never extended. Ties break toward the lexicographically
smaller token sequence, so beam(1), top_k(1) and nucleus with p at or below
the max probability reproduce greedy token for token.
"""

from __future__ import annotations

import numpy as np

from .config import DecodeConfig


def greedy(session, cfg: DecodeConfig) -> list[int]:
    """Argmax each step; stops at EOS or max_new_tokens."""
    out = []
    logprobs, state = session.begin()
    for _ in range(cfg.max_new_tokens):
        tok = int(np.argmax(logprobs))
        if tok == session.eos_id:
            break
        out.append(tok)
        logprobs, state = session.extend(state, tok)
    return out


class _Hyp:
    __slots__ = ("score", "tokens", "state", "logprobs", "finished")

    def __init__(self, score, tokens, state=None, logprobs=None, finished=False):
        self.score = score
        self.tokens = tokens
        self.state = state
        self.logprobs = logprobs
        self.finished = finished

    @property
    def key(self):
        # Highest score first; on ties the shorter/smaller token sequence,
        # which is exactly argmax's smallest-id rule one step at a time.
        return (-self.score, self.tokens)


def beam(session, cfg: DecodeConfig) -> list[int]:
    """Breadth-limited search over joint log-prob, no length normalization."""
    logprobs, state = session.begin()
    hyps = [_Hyp(0.0, (), state=state, logprobs=logprobs)]
    for _ in range(cfg.max_new_tokens):
        live = [h for h in hyps if not h.finished]
        if not live:
            break
        candidates = [h for h in hyps if h.finished]
        for h in live:
            lp = h.logprobs
            for tok in np.nonzero(np.isfinite(lp))[0]:
                tok = int(tok)
                if tok == session.eos_id:
                    candidates.append(_Hyp(h.score + float(lp[tok]), h.tokens, finished=True))
                else:
                    candidates.append(_Hyp(h.score + float(lp[tok]), h.tokens + (tok,),
                                           state=h.state))
        candidates.sort(key=lambda h: h.key)
        hyps = candidates[: cfg.beam_size]
        for h in hyps:
            if not h.finished and h.logprobs is None:
                h.logprobs, h.state = session.extend(h.state, h.tokens[-1])
    best = min(hyps, key=lambda h: h.key)
    return list(best.tokens)


def _probs(logprobs: np.ndarray) -> np.ndarray:
    finite = np.isfinite(logprobs)
    m = logprobs[finite].max()
    p = np.where(finite, np.exp(logprobs - m), 0.0)
    return p / p.sum()


def sample(session, cfg: DecodeConfig) -> list[int]:
    """Top-k or nucleus sampling with a seeded generator."""
    if cfg.strategy not in ("top_k", "nucleus"):
        raise ValueError(f"sample() got strategy {cfg.strategy!r}")
    rng = np.random.default_rng(cfg.seed)
    out = []
    logprobs, state = session.begin()
    for _ in range(cfg.max_new_tokens):
        lp = logprobs / cfg.temperature if cfg.temperature != 1.0 else logprobs
        probs = _probs(lp)
        order = np.argsort(-probs, kind="stable")
        if cfg.strategy == "top_k":
            kept = order[: cfg.top_k]
        else:
            # Smallest prefix of the sorted distribution reaching mass p.
            cum = np.cumsum(probs[order])
            kept = order[: int(np.searchsorted(cum, cfg.top_p)) + 1]
        kept_p = probs[kept]
        tok = int(rng.choice(kept, p=kept_p / kept_p.sum()))
        if tok == session.eos_id:
            break
        out.append(tok)
        logprobs, state = session.extend(state, tok)
    return out


def decode(session, cfg: DecodeConfig) -> list[int]:
    if cfg.strategy == "greedy":
        return greedy(session, cfg)
    if cfg.strategy == "beam":
        return beam(session, cfg)
    return sample(session, cfg)
