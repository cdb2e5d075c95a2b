"""Hyperparameter pilot for the synthetic end-to-end task (dev tool)."""

import argparse
import sys
import time

import numpy as np

from bridgeasr.audio import SynthProfile, synth_utterance
from bridgeasr.config import DecodeConfig, EncoderConfig, LmConfig, TrainConfig
from bridgeasr.decoding import decode
from bridgeasr.evaluate import cer
from bridgeasr.model import AsrModel
from bridgeasr.tokenizer import build_vocab, decode as to_text
from bridgeasr.trainer import Trainer

ALPHABET = "abcdefghijklmnop"


def make_data(n, seed, profile):
    rng = np.random.default_rng([seed, 55])
    data = []
    for i in range(n):
        k = int(rng.integers(3, 11))
        toks = [int(x) for x in rng.integers(0, 16, size=k)]
        data.append((synth_utterance(toks, profile).samples, toks, f"u{i}"))
    return data


def evaluate_model(model, data, vocab, strategy="greedy"):
    cfg = DecodeConfig(strategy=strategy, beam_size=2, max_new_tokens=20)
    refs, hyps = [], []
    t0 = time.perf_counter()
    for wave, toks, _ in data:
        prompt = model.prompt_for_wave(wave)
        ids = decode(model.decoder_session(prompt), cfg)
        refs.append(to_text(toks, vocab))
        hyps.append(to_text(ids, vocab))
    dt = time.perf_counter() - t0
    return cer(refs, hyps).cer, dt


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train-n", type=int, default=2000)
    ap.add_argument("--test-n", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--accum", type=int, default=1)
    ap.add_argument("--warmup", type=float, default=0.25)
    ap.add_argument("--enc-ch", type=int, default=0, help="0 = per-layer default ramp")
    ap.add_argument("--enc-d", type=int, default=96)
    ap.add_argument("--enc-layers", type=int, default=2)
    ap.add_argument("--lm-d", type=int, default=128)
    ap.add_argument("--lm-layers", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--freeze-lm", action="store_true")
    ap.add_argument("--peft-lm", action="store_true")
    ap.add_argument("--peft-rank", type=int, default=32)
    args = ap.parse_args()

    vocab = build_vocab([ALPHABET])
    profile = SynthProfile(n_tokens=16, noise_sigma=0.01, seed=100)
    train_data = make_data(args.train_n, 1, profile)
    test_data = make_data(args.test_n, 2, profile)

    conv_ch = args.enc_ch if args.enc_ch else EncoderConfig().conv_channels
    enc = EncoderConfig(conv_channels=conv_ch, n_layers=args.enc_layers,
                        d_model=args.enc_d, n_heads=4, d_ff=4 * args.enc_d)
    lm = LmConfig(n_layers=args.lm_layers, d_model=args.lm_d, n_heads=4,
                  d_ff=4 * args.lm_d, max_positions=128)
    model = AsrModel(vocab, enc, lm, bridge_mode="downsample", seed=args.seed)
    n_params = sum(p.size for p in model.parameters())
    print(f"params: {n_params/1e6:.2f}M", flush=True)

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, grad_accum=args.accum,
                      warmup_frac=args.warmup,
                      peak_lr=args.lr, seed=args.seed, freeze_lm=args.freeze_lm,
                      peft_lm=args.peft_lm, peft_rank=args.peft_rank)
    trainer = Trainer(model, cfg)
    t0 = time.perf_counter()
    records = trainer.train(train_data)
    train_t = time.perf_counter() - t0
    print(f"train: {train_t:.1f}s for {records[-1].step} steps "
          f"({1000*train_t/records[-1].step:.0f} ms/step), final loss {records[-1].total:.4f}",
          flush=True)
    for r in records[:: max(1, len(records)//10)]:
        print(f"  step {r.step:4d} lr {r.lr:.2e} loss {r.total:.4f}")

    test_cer, dt = evaluate_model(model, test_data, vocab)
    print(f"greedy test CER: {test_cer:.4f}  (decode {dt:.1f}s)")


if __name__ == "__main__":
    sys.exit(main())
