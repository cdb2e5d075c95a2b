"""Domain-shift adaptation pilot (dev tool): remap 4 tones, LoRA-adapt."""

import time

import numpy as np

from bridgeasr.audio import SynthProfile, synth_utterance
from bridgeasr.config import DecodeConfig, EncoderConfig, LmConfig, LoraConfig, TrainConfig
from bridgeasr.decoding import greedy
from bridgeasr.evaluate import cer
from bridgeasr.lora import attach
from bridgeasr.model import AsrModel
from bridgeasr.tokenizer import build_vocab, decode as to_text
from bridgeasr.trainer import Trainer

ALPHABET = "abcdefghijklmnop"
SHIFT = ((12, 950.0), (13, 985.0), (14, 1020.0), (15, 1055.0))


def make_data(n, seed, profile):
    rng = np.random.default_rng([seed, 55])
    out = []
    for i in range(n):
        toks = [int(x) for x in rng.integers(0, 16, size=int(rng.integers(3, 11)))]
        out.append((synth_utterance(toks, profile).samples, toks, f"u{i}"))
    return out


def eval_cer(model, data, vocab):
    cfg = DecodeConfig(max_new_tokens=20)
    refs, hyps = [], []
    for w, toks, _ in data:
        ids = greedy(model.decoder_session(model.prompt_for_wave(w)), cfg)
        refs.append(to_text(toks, vocab))
        hyps.append(to_text(ids, vocab))
    return cer(refs, hyps).cer


def main():
    vocab = build_vocab([ALPHABET])
    base_prof = SynthProfile(n_tokens=16, noise_sigma=0.01, seed=100)
    shift_prof = SynthProfile(n_tokens=16, noise_sigma=0.01, seed=200, tone_overrides=SHIFT)

    enc = EncoderConfig(d_model=128, n_heads=4, d_ff=512)
    lm = LmConfig(n_layers=3, d_model=128, n_heads=4, d_ff=512, max_positions=128)
    model = AsrModel(vocab, enc, lm, bridge_mode="downsample", seed=0)
    t0 = time.perf_counter()
    Trainer(model, TrainConfig(epochs=8, batch_size=8, grad_accum=1, peak_lr=7e-4,
                               warmup_frac=1.0, seed=0)).train(make_data(2000, 1, base_prof))
    print(f"base trained in {time.perf_counter()-t0:.0f}s")

    base_test = make_data(200, 2, base_prof)
    shift_test = make_data(200, 3, shift_prof)
    print("base CER on base test:   ", round(eval_cer(model, base_test, vocab), 4))
    print("base CER on shifted test:", round(eval_cer(model, shift_test, vocab), 4))

    attach(model, LoraConfig(rank=32, alpha=32.0, targets=("encoder", "bridge", "lm")), seed=0)
    adapt_data = make_data(200, 4, shift_prof)
    t0 = time.perf_counter()
    Trainer(model, TrainConfig(epochs=20, batch_size=8, grad_accum=1, peak_lr=1e-3,
                               warmup_frac=1.0, seed=0)).train(adapt_data)
    print(f"adapted in {time.perf_counter()-t0:.0f}s")
    print("adapted CER on shifted test:", round(eval_cer(model, shift_test, vocab), 4))
    print("adapted CER on base test:   ", round(eval_cer(model, base_test, vocab), 4))


if __name__ == "__main__":
    main()
