"""Model assemblies: encoder+bridge+LM for prompted recognition, and the
encoder+CTC-only baseline. Owns batching glue (padding, per-utterance
lengths) and exposes the incremental interface the decoders drive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import make_bridge
from .config import EncoderConfig, LmConfig
from .ctc import CtcHead, ctc_frame_labels, ctc_loss
from .encoder import SpeechEncoder
from .layers import Module
from .lm import DecoderLm, lm_loss
from .tensor import Tensor
from .tokenizer import Vocab


@dataclass
class Batch:
    """Right-padded waveforms plus encoded transcripts."""

    waves: np.ndarray              # [B, L_max] float32
    wave_lens: list[int]
    texts: list[list[int]]         # char ids per utterance
    utt_ids: list[str]


def collate(waveforms, texts, utt_ids=None) -> Batch:
    lens = [w.shape[0] for w in waveforms]
    l_max = max(lens)
    buf = np.zeros((len(waveforms), l_max), dtype=np.float32)
    for i, w in enumerate(waveforms):
        buf[i, : w.shape[0]] = w
    if utt_ids is None:
        utt_ids = [str(i) for i in range(len(waveforms))]
    return Batch(waves=buf, wave_lens=lens, texts=[list(t) for t in texts], utt_ids=utt_ids)


class AsrModel(Module):
    """Speech encoder -> bridge -> decoder LM (plus a CTC branch when the
    bridge compresses on CTC labels)."""

    kind = "asr"

    def __init__(self, vocab: Vocab, enc_cfg: EncoderConfig, lm_cfg: LmConfig,
                 bridge_mode: str = "downsample", seed: int = 0, dtype=np.float32):
        lm_cfg.vocab_size = vocab.lm_size
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        self.lm_cfg = lm_cfg
        self.bridge_mode = bridge_mode
        rng = np.random.default_rng([seed, 7])
        self.encoder = SpeechEncoder(rng, enc_cfg, dtype=dtype)
        self.bridge = make_bridge(rng, bridge_mode, enc_cfg.d_model, lm_cfg.d_model, dtype=dtype)
        self.ctc_head = CtcHead(rng, enc_cfg.d_model, vocab.ctc_size, dtype=dtype) if self.bridge.needs_ctc else None
        self.lm = DecoderLm(rng, lm_cfg, dtype=dtype)
        self.encoder.apply_freezes()

    def named_parameters(self, prefix=""):
        out = {}
        base = f"{prefix}." if prefix else ""
        out.update(self.encoder.named_parameters(f"{base}encoder"))
        out.update(self.bridge.named_parameters(f"{base}bridge"))
        if self.ctc_head is not None:
            out.update(self.ctc_head.named_parameters(f"{base}ctc_head"))
        out.update(self.lm.named_parameters(f"{base}lm"))
        return out

    # -- training forward --------------------------------------------------------

    def prompts_for(self, feats, frame_lens):
        """Bridge the contextual frames into per-utterance prompt lists.

        For CTC modes the selection labels come from the current CTC branch;
        no gradient flows through the discrete selection itself.
        """
        labels = None
        log_probs = None
        if self.bridge.needs_ctc:
            log_probs = self.ctc_head(feats)
            labels = [ctc_frame_labels(log_probs.data[b, :t]) for b, t in enumerate(frame_lens)]
        prompts = self.bridge(feats, frame_lens, labels=labels, blank=self.vocab.blank_id)
        return prompts, log_probs

    def forward_batch(self, batch: Batch, lambda_ctc: float = 0.5):
        """Compute (loss_lm, loss_ctc or None, total) for one batch."""
        feats, frame_lens = self.encoder(batch.waves, batch.wave_lens)
        prompts, ctc_logp = self.prompts_for(feats, frame_lens)

        assembled = [
            self.lm.assemble_prompt(p, y, self.vocab, training=True)
            for p, y in zip(prompts, batch.texts)
        ]
        l_max = max(a.embeddings.shape[0] for a in assembled)
        d = self.lm_cfg.d_model
        rows, masks, targets = [], [], []
        for a in assembled:
            n = a.embeddings.shape[0]
            pad = l_max - n
            if pad:
                rows.append(T.concat([a.embeddings, Tensor(np.zeros((pad, d), dtype=a.embeddings.data.dtype))], axis=0))
            else:
                rows.append(a.embeddings)
            masks.append(np.concatenate([a.loss_mask, np.zeros(pad, dtype=bool)]))
            targets.append(np.concatenate([a.targets, np.full(pad, -1, dtype=np.int64)]))
        x = T.stack(rows, axis=0)
        logits = self.lm(x)
        loss_lm = lm_loss(logits, np.stack(targets), np.stack(masks))

        loss_ctc = None
        if ctc_logp is not None:
            per_utt = [
                ctc_loss(ctc_logp[b, :t], batch.texts[b], self.vocab.blank_id)
                for b, t in enumerate(frame_lens)
            ]
            loss_ctc = T.stack(per_utt).mean()
        total = loss_lm if loss_ctc is None else loss_lm + lambda_ctc * loss_ctc
        return loss_lm, loss_ctc, total

    def lm_mask_count(self, batch: Batch) -> int:
        # One target row per text token plus EOS.
        return sum(len(t) + 1 for t in batch.texts)

    # -- inference ---------------------------------------------------------------

    def prompt_for_wave(self, wave: np.ndarray):
        """Single-utterance speech prompt [M, d_lm] (eval mode)."""
        with T.no_grad():
            feats, frame_lens = self.encoder(wave[None, :], [wave.shape[0]])
            prompts, _ = self.prompts_for(feats, frame_lens)
        return prompts[0]

    def decoder_session(self, prompt):
        return _LmSession(self, prompt)


class _LmSession:
    """Step interface the decoding strategies drive.

    States are (cache, logits) pairs; extending a state clones the cache so
    hypotheses stay independent.
    """

    def __init__(self, model: AsrModel, prompt):
        self.model = model
        self.prompt = prompt
        v = model.vocab
        self.eos_id = v.eos_id
        self.forbidden_ids = (v.pad_id, v.unk_id, v.bos_id)

    def begin(self):
        """Run [prompt; BOS] and return (first-step logprobs, state)."""
        with T.no_grad():
            cache = self.model.lm.start_cache()
            bos = self.model.lm.embed_ids([self.model.vocab.bos_id])
            first = T.concat([self.prompt, bos], axis=0) if self.prompt.shape[0] else bos
            logits = self.model.lm.forward_step(first.reshape((1,) + first.shape), cache)
        return self._logprobs(logits), cache

    def extend(self, state, token: int):
        with T.no_grad():
            cache = state.clone()
            emb = self.model.lm.embed_ids([int(token)])
            logits = self.model.lm.forward_step(emb.reshape((1, 1, -1)), cache)
        return self._logprobs(logits), cache

    def _logprobs(self, logits):
        lp = T.log_softmax(logits, axis=-1).data.copy()
        for t in self.forbidden_ids:
            lp[t] = -np.inf
        return lp


class CtcModel(Module):
    """Encoder + CTC head only: the alignment-trained baseline, also used
    to warm-start CTC-compressed bridges."""

    kind = "ctc"

    def __init__(self, vocab: Vocab, enc_cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.vocab = vocab
        self.enc_cfg = enc_cfg
        rng = np.random.default_rng([seed, 7])
        self.encoder = SpeechEncoder(rng, enc_cfg, dtype=dtype)
        self.ctc_head = CtcHead(rng, enc_cfg.d_model, vocab.ctc_size, dtype=dtype)
        self.encoder.apply_freezes()

    def named_parameters(self, prefix=""):
        out = {}
        base = f"{prefix}." if prefix else ""
        out.update(self.encoder.named_parameters(f"{base}encoder"))
        out.update(self.ctc_head.named_parameters(f"{base}ctc_head"))
        return out

    def forward_batch(self, batch: Batch, lambda_ctc: float = 0.5):
        feats, frame_lens = self.encoder(batch.waves, batch.wave_lens)
        logp = self.ctc_head(feats)
        per_utt = [
            ctc_loss(logp[b, :t], batch.texts[b], self.vocab.blank_id)
            for b, t in enumerate(frame_lens)
        ]
        loss = T.stack(per_utt).mean()
        return None, loss, loss

    def transcribe_ids(self, wave: np.ndarray) -> list[int]:
        from .ctc import ctc_collapse

        with T.no_grad():
            feats, frame_lens = self.encoder(wave[None, :], [wave.shape[0]])
            logp = self.ctc_head(feats)
        labels = ctc_frame_labels(logp.data[0, : frame_lens[0]])
        return ctc_collapse(labels, self.vocab.blank_id)
