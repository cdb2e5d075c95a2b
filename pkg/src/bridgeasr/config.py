"""Dataclass configs for the encoder, LM, training, decoding, and LoRA."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


@dataclass
class EncoderConfig:
    conv_kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    conv_strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    conv_channels: int | tuple[int, ...] = (32, 48, 64, 96, 96, 128, 128)
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    freeze_conv: bool = True
    freeze_all: bool = False

    def __post_init__(self):
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ValueError("conv_kernels and conv_strides must have equal length")
        if isinstance(self.conv_channels, tuple) and len(self.conv_channels) != len(self.conv_kernels):
            raise ValueError("conv_channels tuple must match conv_kernels length")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def channels_per_layer(self) -> tuple[int, ...]:
        if isinstance(self.conv_channels, tuple):
            return self.conv_channels
        return (self.conv_channels,) * len(self.conv_kernels)

    @property
    def total_stride(self) -> int:
        p = 1
        for s in self.conv_strides:
            p *= s
        return p


@dataclass
class LmConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    vocab_size: int = 20
    rotary_fraction: float = 1.0
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary position pairs")


@dataclass
class TrainConfig:
    lambda_ctc: float = 0.5
    peak_lr: float = 1e-4
    warmup_frac: float = 0.25       # fraction of the first epoch's steps
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    epochs: int = 5
    batch_size: int = 16
    grad_accum: int = 4
    mode: str = "joint"             # joint | ctc_only
    bridge_mode: str = "downsample"
    freeze_encoder: bool = False
    freeze_lm: bool = False
    peft_lm: bool = False
    peft_rank: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lambda_ctc < 0:
            raise ValueError("lambda_ctc must be >= 0")
        if self.mode not in ("joint", "ctc_only"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.bridge_mode not in ("downsample", "ctc_remove", "ctc_average"):
            raise ValueError(f"unknown bridge mode {self.bridge_mode!r}")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"        # greedy | beam | top_k | nucleus
    beam_size: int = 2
    top_k: int = 2
    top_p: float = 0.1
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "top_k", "nucleus"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")


@dataclass
class LoraConfig:
    rank: int = 32
    alpha: float = 32.0             # alpha/rank = 1 by default
    targets: tuple[str, ...] = ("encoder", "lm")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for t in self.targets:
            if t not in ("encoder", "bridge", "lm"):
                raise ValueError(f"unknown adaptation target {t!r}")


def asdict_flat(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def config_from_dict(cls, d: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in fields:
            raise ValueError(f"unknown {cls.__name__} key {k!r}")
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    return cls(**kwargs)
