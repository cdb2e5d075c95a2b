"""Low-rank adaptation: frozen base weight plus trainable A/B delta.

Wrapped layers keep their base parameter names (`w`, `b`) so checkpoints
of adapted and plain models line up; the delta matrices appear as
`lora_a` / `lora_b`. Attaching with default scope freezes the whole model
first, which is the domain-adaptation setting: only A/B train afterwards.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import LoraConfig
from .layers import Conv1d, Linear, Module
from .tensor import Tensor


class InvalidTargetError(ValueError):
    """Requested adaptation target does not exist in this model."""


class AlreadyMergedError(RuntimeError):
    pass


class LoraLinear(Module):
    def __init__(self, rng, base: Linear, rank: int, alpha: float):
        d_in, d_out = base.w.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min dim of {base.w.shape}")
        self.w = base.w
        self.b = base.b
        self.w.requires_grad = False
        self.b.requires_grad = False
        # A Gaussian, B zero: the adapted layer equals the base layer at init.
        self.lora_a = Tensor(rng.normal(0.0, 0.02, size=(d_in, rank)).astype(base.w.dtype), requires_grad=True)
        self.lora_b = Tensor(np.zeros((rank, d_out), dtype=base.w.dtype), requires_grad=True)
        self.scale = alpha / rank

    def __call__(self, x):
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        y = T.matmul(flat, self.w) + self.b
        delta = T.matmul(T.matmul(flat, self.lora_a), self.lora_b) * self.scale
        y = y + delta
        if x.ndim != 2:
            y = y.reshape(lead + (self.w.shape[1],))
        return y

    def merged(self) -> Linear:
        out = Linear.__new__(Linear)
        out.w = Tensor(self.w.data + self.scale * (self.lora_a.data @ self.lora_b.data),
                       requires_grad=True)
        out.b = Tensor(self.b.data.copy(), requires_grad=True)
        return out


class LoraConv1d(Module):
    """Kernel treated as a [C_out, C_in*K] matrix for the low-rank delta."""

    def __init__(self, rng, base: Conv1d, rank: int, alpha: float):
        c_out, c_in, k = base.w.shape
        if rank > min(c_in * k, c_out):
            raise ValueError(f"rank {rank} exceeds min dim of flattened kernel {base.w.shape}")
        self.w = base.w
        self.w.requires_grad = False
        self.stride = base.stride
        self.lora_a = Tensor(rng.normal(0.0, 0.02, size=(c_in * k, rank)).astype(base.w.dtype), requires_grad=True)
        self.lora_b = Tensor(np.zeros((rank, c_out), dtype=base.w.dtype), requires_grad=True)
        self.scale = alpha / rank

    def _effective_kernel(self):
        c_out, c_in, k = self.w.shape
        delta = T.transpose(T.matmul(self.lora_a, self.lora_b), (1, 0)).reshape((c_out, c_in, k))
        return self.w + delta * self.scale

    def __call__(self, x):
        return T.conv1d(x, self._effective_kernel(), stride=self.stride)

    def merged(self) -> Conv1d:
        out = Conv1d.__new__(Conv1d)
        out.w = Tensor(self._effective_kernel().data.copy(), requires_grad=True)
        out.stride = self.stride
        return out


def _attention_sites(module) -> list[tuple[Module, str]]:
    return [(blk.attn, name) for blk in module.blocks for name in ("wq", "wk", "wv", "wo")]


def _target_sites(model, target: str) -> list[tuple[Module, str]]:
    if target == "encoder" and hasattr(model, "encoder"):
        return _attention_sites(model.encoder)
    if target == "lm" and getattr(model, "lm", None) is not None:
        return _attention_sites(model.lm)
    if target == "bridge" and getattr(model, "bridge", None) is not None:
        sites = [(model.bridge, "proj")]
        if hasattr(model.bridge, "conv1"):
            sites += [(model.bridge, "conv1"), (model.bridge, "conv2")]
        return sites
    raise InvalidTargetError(f"model has no adaptation target {target!r}")


def attach(model, cfg: LoraConfig, seed: int = 0, freeze_scope: str = "model"):
    """Wrap the configured targets with low-rank adapters.

    freeze_scope "model" freezes every existing parameter first (adaptation
    runs train nothing but A/B); "wrapped" freezes only the wrapped layers'
    own base weights (used when other modules keep training).
    """
    if getattr(model, "_lora_cfg", None) is not None:
        raise ValueError("model already has adapters attached")
    sites = []
    for target in cfg.targets:
        sites.extend(_target_sites(model, target))
    if freeze_scope == "model":
        model.freeze()
    elif freeze_scope != "wrapped":
        raise ValueError(f"unknown freeze_scope {freeze_scope!r}")
    rng = np.random.default_rng([seed, 31])
    for owner, name in sites:
        layer = getattr(owner, name)
        if isinstance(layer, Linear):
            setattr(owner, name, LoraLinear(rng, layer, cfg.rank, cfg.alpha))
        elif isinstance(layer, Conv1d):
            setattr(owner, name, LoraConv1d(rng, layer, cfg.rank, cfg.alpha))
        else:
            raise InvalidTargetError(f"{name} is not an adaptable layer: {type(layer).__name__}")
    model._lora_cfg = cfg
    return model


def iter_adapters(model):
    for target in ("encoder", "bridge", "lm"):
        try:
            sites = _target_sites(model, target)
        except InvalidTargetError:
            continue
        for owner, name in sites:
            layer = getattr(owner, name)
            if isinstance(layer, (LoraLinear, LoraConv1d)):
                yield owner, name, layer


def merge(model):
    """Fold every adapter back into a plain layer; forbid a second merge."""
    if getattr(model, "_lora_cfg", None) is None:
        raise AlreadyMergedError("no adapters attached (already merged or never attached)")
    for owner, name, layer in list(iter_adapters(model)):
        setattr(owner, name, layer.merged())
    model._lora_cfg = None
    model._lora_merged = True
    return model


def adapter_parameters(model) -> dict[str, Tensor]:
    return {k: v for k, v in model.named_parameters().items() if ".lora_" in k}
