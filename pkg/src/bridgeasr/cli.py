"""Command-line surface: synth-data, train, adapt, transcribe, evaluate.

Config files are line-oriented `key = value` with dotted sections
(encoder.*, lm.*, train.*, decode.*); unknown keys are errors. CLI flags
override file values. Exit codes: 0 ok, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor
from .audio import (SynthProfile, generate_corpus, load_manifest, read_wav, resolve_audio)
from .checkpoint import (load_adapter_into, load_checkpoint, save_adapter, save_checkpoint, warm_start)
from .config import DecodeConfig, EncoderConfig, LmConfig, LoraConfig, TrainConfig
from .decoding import decode as run_decode
from .evaluate import build_report
from .lora import attach
from .model import AsrModel, CtcModel
from .tokenizer import build_vocab, decode as ids_to_text, encode
from .trainer import Trainer
from .tokenizer import Vocab


class UsageError(Exception):
    pass


_SECTIONS = {
    "encoder": EncoderConfig,
    "lm": LmConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
}


def _coerce(text: str, ftype: str):
    text = text.strip()
    if ftype == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {text!r}")
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    if ftype == "str":
        return text
    # tuple-of-int fields, e.g. conv kernels: "10,3,3,3,3,2,2"; fields typed
    # int-or-tuple collapse a single value back to int.
    vals = tuple(int(x) for x in text.split(","))
    if "int |" in ftype and len(vals) == 1:
        return vals[0]
    return vals


def parse_config_file(path) -> dict:
    """Parse `section.key = value` lines into {section: {key: value}}."""
    values = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise UsageError(f"{path}:{lineno}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise UsageError(f"{path}:{lineno}: unknown section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(_SECTIONS[section])}
        if name not in fields:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[section][name] = _coerce(text, str(fields[name].type))
    return values


def build_configs(args) -> dict:
    values = parse_config_file(args.config) if getattr(args, "config", None) else {
        name: {} for name in _SECTIONS
    }
    # Flags override file values.
    overrides = {
        ("train", "bridge_mode"): getattr(args, "bridge", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("train", "batch_size"): getattr(args, "batch_size", None),
        ("train", "peak_lr"): getattr(args, "lr", None),
        ("train", "seed"): getattr(args, "seed", None),
        ("train", "mode"): getattr(args, "mode", None),
        ("train", "grad_accum"): getattr(args, "grad_accum", None),
        ("train", "freeze_encoder"): True if getattr(args, "freeze_encoder", False) else None,
        ("train", "freeze_lm"): True if getattr(args, "freeze_lm", False) else None,
        ("train", "peft_lm"): True if getattr(args, "peft_lm", False) else None,
    }
    for (section, key), val in overrides.items():
        if val is not None:
            values[section][key] = val
    out = {}
    for name, cls in _SECTIONS.items():
        try:
            out[name] = cls(**values[name])
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad {name} config: {e}") from e
    return out


def _parse_remap(text: str) -> tuple[tuple[int, float], ...]:
    pairs = []
    for part in text.split(","):
        tok, hz = part.split(":")
        pairs.append((int(tok), float(hz)))
    return tuple(pairs)


def _load_dataset(manifest_path, vocab):
    entries = load_manifest(manifest_path)
    data = []
    for e in entries:
        wav = read_wav(resolve_audio(manifest_path, e))
        data.append((wav.samples, encode(e.text, vocab), e.audio))
    return data, entries


def cmd_synth_data(args) -> int:
    alphabet = args.alphabet
    vocab = build_vocab([alphabet])
    profile = SynthProfile(
        n_tokens=vocab.n_chars,
        tone_overrides=_parse_remap(args.remap) if args.remap else (),
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    entries = generate_corpus(vocab, args.utts, (args.len_min, args.len_max), profile, args.out)
    print(f"wrote {len(entries)} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfgs = build_configs(args)
    train_cfg: TrainConfig = cfgs["train"]
    entries = load_manifest(args.manifest)
    vocab = build_vocab(e.text for e in entries)
    dataset, _ = _load_dataset(args.manifest, vocab)
    if train_cfg.mode == "ctc_only":
        model = CtcModel(vocab, cfgs["encoder"], seed=train_cfg.seed)
    else:
        model = AsrModel(vocab, cfgs["encoder"], cfgs["lm"],
                         bridge_mode=train_cfg.bridge_mode, seed=train_cfg.seed)
    if args.init:
        used = warm_start(model, args.init)
        print(f"warm start from {args.init}: {len(used)} tensors")
    trainer = Trainer(model, train_cfg, lora_seed=train_cfg.seed)
    records = trainer.train(dataset, log_path=args.log)
    save_checkpoint(model, args.out)
    last = records[-1]
    print(f"trained {last.step} steps, final total loss {last.total:.4f}; checkpoint: {args.out}")
    return 0


def cmd_adapt(args) -> int:
    model, _ = load_checkpoint(args.base)
    lora_cfg = LoraConfig(rank=args.rank, alpha=args.alpha if args.alpha is not None else float(args.rank),
                          targets=tuple(args.targets.split(",")))
    attach(model, lora_cfg, seed=args.seed, freeze_scope="model")
    dataset, _ = _load_dataset(args.manifest, model.vocab)
    train_cfg = TrainConfig(
        mode="joint" if model.kind == "asr" else "ctc_only",
        bridge_mode=getattr(model, "bridge_mode", "downsample"),
        epochs=args.epochs, batch_size=args.batch_size, grad_accum=args.grad_accum,
        peak_lr=args.lr, seed=args.seed,
    )
    trainer = Trainer(model, train_cfg)
    trainer.train(dataset, log_path=args.log)
    save_adapter(model, lora_cfg, args.out)
    print(f"adapter written to {args.out} (base checkpoint untouched)")
    return 0


def _transcribe_one(model, samples, decode_cfg):
    if model.kind == "ctc":
        return model.transcribe_ids(samples)
    prompt = model.prompt_for_wave(samples)
    return run_decode(model.decoder_session(prompt), decode_cfg)


def cmd_transcribe(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    if args.adapter:
        load_adapter_into(model, args.adapter)
    decode_cfg = DecodeConfig(strategy=args.strategy, beam_size=args.beam,
                              top_k=args.k, top_p=args.p, seed=args.seed,
                              max_new_tokens=args.max_new_tokens)
    entries = load_manifest(args.manifest)
    lines = []
    timings = []
    failures = 0
    for e in entries:
        t0 = time.perf_counter()
        try:
            wav = read_wav(resolve_audio(args.manifest, e))
            ids = _transcribe_one(model, wav.samples, decode_cfg)
            lines.append(ids_to_text(ids, model.vocab))
        except Exception as exc:  # noqa: BLE001 - every utterance must yield a line
            failures += 1
            lines.append("")
            print(f"error: {e.audio}: {exc}", file=sys.stderr)
        timings.append(time.perf_counter() - t0)
    Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if args.timings:
        Path(args.timings).write_text(json.dumps(timings), encoding="utf-8")
    print(f"transcribed {len(lines)} utterances ({failures} failures) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    entries = load_manifest(args.manifest)
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(hyps) != len(entries):
        raise UsageError(f"{len(hyps)} hypothesis lines for {len(entries)} manifest entries")
    durations = []
    for e in entries:
        wav = read_wav(resolve_audio(args.manifest, e))
        durations.append(wav.duration_s)
    decode_seconds = None
    if args.timings:
        decode_seconds = json.loads(Path(args.timings).read_text(encoding="utf-8"))
    report = build_report([e.text for e in entries], hyps, durations,
                          decode_seconds=decode_seconds,
                          boundaries=(args.short_s, args.long_s), rtf_n=args.rtf_n)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; usage errors are exit 1 here.
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bridgeasr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic tone corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--utts", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--len-min", dest="len_min", type=int, default=3)
    s.add_argument("--len-max", dest="len_max", type=int, default=10)
    s.add_argument("--sigma", type=float, default=0.01)
    s.add_argument("--alphabet", default="abcdefghijklmnop")
    s.add_argument("--remap", default=None,
                   help="token:hz pairs, e.g. '12:950,13:985' (shifted domain)")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--log", default=None)
    s.add_argument("--init", default=None, help="warm-start checkpoint")
    s.add_argument("--bridge", choices=("downsample", "ctc_remove", "ctc_average"), default=None)
    s.add_argument("--mode", choices=("joint", "ctc_only"), default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    s.add_argument("--grad-accum", dest="grad_accum", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--freeze-encoder", action="store_true")
    s.add_argument("--freeze-lm", action="store_true")
    s.add_argument("--peft-lm", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("adapt", help="LoRA-adapt a trained model; writes adapter only")
    s.add_argument("--base", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rank", type=int, default=32)
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--targets", default="encoder,lm",
                   help="comma subset of encoder,bridge,lm")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    s.add_argument("--grad-accum", dest="grad_accum", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", default=None)
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("transcribe", help="decode a manifest with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--adapter", default=None)
    s.add_argument("--strategy", choices=("greedy", "beam", "top_k", "nucleus"), default="greedy")
    s.add_argument("--beam", type=int, default=2)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--p", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=64)
    s.add_argument("--timings", default=None, help="write per-utterance decode seconds (JSON)")
    s.set_defaults(fn=cmd_transcribe)

    s = sub.add_parser("evaluate", help="score hypotheses against a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--timings", default=None)
    s.add_argument("--short-s", dest="short_s", type=float, default=5.1)
    s.add_argument("--long-s", dest="long_s", type=float, default=15.9)
    s.add_argument("--rtf-n", dest="rtf_n", type=int, default=100)
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    tensor.DETERMINISTIC = os.environ.get("NUE_DETERMINISTIC", "1") != "0"
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
