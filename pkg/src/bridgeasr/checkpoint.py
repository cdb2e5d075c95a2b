"""Bit-exact binary checkpoints.

Layout (all little-endian):
  magic "NUEA" | version byte | u32 config-JSON length + UTF-8 bytes |
  u32 vocab length + UTF-8 char list in id order | u32 param count |
  per param: u32 name length + UTF-8 name, u32 rank, u32 dims..., f32 payload.

A file must parse to exactly its own length; anything shorter is corrupt,
anything with the wrong magic or version is incompatible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import (EncoderConfig, LmConfig, LoraConfig, asdict_flat, config_from_dict)
from .tokenizer import Vocab

MAGIC = b"NUEA"
VERSION = 1


class IncompatibleCheckpointError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def _config_snapshot(model) -> dict:
    snap = {"kind": model.kind, "encoder": asdict_flat(model.enc_cfg)}
    if model.kind == "asr":
        snap["lm"] = asdict_flat(model.lm_cfg)
        snap["bridge_mode"] = model.bridge_mode
    return snap


def _write_blob(f, payload: bytes):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def save_params(path, config: dict, vocab_chars: str, params: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        _write_blob(f, json.dumps(config, sort_keys=True).encode("utf-8"))
        _write_blob(f, vocab_chars.encode("utf-8"))
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            data = np.ascontiguousarray(p.data, dtype="<f4")
            _write_blob(f, name.encode("utf-8"))
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<I", dim))
            f.write(data.tobytes())


def save_checkpoint(model, path) -> None:
    """Persist every named parameter plus config and vocab."""
    save_params(path, _config_snapshot(model), model.vocab.chars, model.named_parameters())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.raw)


def read_params(path):
    """Parse a checkpoint into (config dict, vocab chars, name->array)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise IncompatibleCheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.take(1)[0]
    if version != VERSION:
        raise IncompatibleCheckpointError(f"{path}: version {version}, expected {VERSION}")
    config = json.loads(r.blob().decode("utf-8"))
    vocab_chars = r.blob().decode("utf-8")
    n_params = r.u32()
    params = {}
    for _ in range(n_params):
        name = r.blob().decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32)
    if not r.done():
        raise CorruptCheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return config, vocab_chars, params


def load_checkpoint(path):
    """Rebuild the saved model; forward outputs reproduce bit-exactly."""
    from .model import AsrModel, CtcModel

    config, vocab_chars, params = read_params(path)
    vocab = Vocab(vocab_chars)
    enc_cfg = config_from_dict(EncoderConfig, config["encoder"])
    if config["kind"] == "asr":
        lm_cfg = config_from_dict(LmConfig, config["lm"])
        model = AsrModel(vocab, enc_cfg, lm_cfg, bridge_mode=config["bridge_mode"])
    elif config["kind"] == "ctc":
        model = CtcModel(vocab, enc_cfg)
    else:
        raise IncompatibleCheckpointError(f"{path}: cannot load a {config['kind']!r} checkpoint as a model")
    _assign(model, params, path)
    return model, config


def _assign(model, params, path):
    own = model.named_parameters()
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise IncompatibleCheckpointError(
            f"{path}: parameter names do not match model (missing {missing}, extra {extra})"
        )
    for name, tensor in own.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise ShapeMismatchError(
                f"{path}: {name} has shape {arr.shape}, model expects {tensor.data.shape}"
            )
        tensor.data = arr.copy()


def warm_start(model, path) -> list[str]:
    """Copy parameters that match by name and shape; return the names used.

    Used to seed a bridged model from an alignment-pretrained encoder.
    """
    _, _, params = read_params(path)
    own = model.named_parameters()
    used = []
    for name, arr in params.items():
        if name in own and own[name].data.shape == arr.shape:
            own[name].data = arr.copy()
            used.append(name)
    return used


def save_adapter(model, lora_cfg: LoraConfig, path) -> None:
    """Store only the A/B adapter matrices plus the adaptation config."""
    from .lora import adapter_parameters

    adapters = adapter_parameters(model)
    if not adapters:
        raise ValueError("model has no adapters to save")
    config = {
        "kind": "adapter",
        "base_kind": model.kind,
        "lora": asdict_flat(lora_cfg),
    }
    save_params(path, config, model.vocab.chars, adapters)


def load_adapter_into(model, path, seed: int = 0):
    """Attach adapters per the file's config and fill in the saved A/B."""
    from .lora import attach

    config, _, params = read_params(path)
    if config.get("kind") != "adapter":
        raise IncompatibleCheckpointError(f"{path}: not an adapter checkpoint")
    lora_cfg = config_from_dict(LoraConfig, config["lora"])
    attach(model, lora_cfg, seed=seed, freeze_scope="model")
    own = {k: v for k, v in model.named_parameters().items() if ".lora_" in k}
    if set(own) != set(params):
        raise IncompatibleCheckpointError(f"{path}: adapter names do not match the base model")
    for name, arr in params.items():
        if own[name].data.shape != arr.shape:
            raise ShapeMismatchError(
                f"{path}: {name} has shape {arr.shape}, base model expects {own[name].data.shape}"
            )
        own[name].data = arr.copy()
    return model, lora_cfg
