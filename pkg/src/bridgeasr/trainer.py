"""Joint optimization: AdamW, warmup+cosine schedule, gradient accumulation,
freeze policies for the ablation matrix, and the training loop.

Losses follow a mean convention: the LM term is the mean over scored
positions, the alignment term the mean over utterances. Accumulated
micro-batches are weighted by their share of the macro-batch so k micro
steps equal one step on the concatenated batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import LoraConfig, TrainConfig
from .model import Batch, collate
from .tensor import Tensor


class TrainingDivergedError(RuntimeError):
    pass


def lr_at(step: int, *, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear 0 -> peak over warmup, cosine peak -> 0 at total_steps."""
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay; skips frozen parameters entirely."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_lm: float | None
    loss_ctc: float | None
    total: float

    def line(self) -> str:
        def fmt(x):
            return "" if x is None else f"{x:.9g}"
        return f"{self.step},{fmt(self.lr)},{fmt(self.loss_lm)},{fmt(self.loss_ctc)},{fmt(self.total)}"


LOG_HEADER = "step,lr,loss_lm,loss_ctc,total"


def bucket_batches(dataset, batch_size: int, rng) -> list[list[int]]:
    """Length-bucketed index batches in a seeded-shuffled order."""
    order = sorted(range(len(dataset)), key=lambda i: (dataset[i][0].shape[0], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return batches


class Trainer:
    def __init__(self, model, cfg: TrainConfig, lora_seed: int = 0):
        self.model = model
        self.cfg = cfg
        self._apply_freezes(lora_seed)
        self.params = model.named_parameters()
        self.opt = AdamW(self.params, beta1=cfg.beta1, beta2=cfg.beta2,
                         weight_decay=cfg.weight_decay)
        self.step_idx = 0
        self.total_steps = None
        self.warmup_steps = None

    def _apply_freezes(self, lora_seed):
        cfg = self.cfg
        if cfg.freeze_encoder:
            self.model.encoder.freeze()
        if cfg.freeze_lm and getattr(self.model, "lm", None) is not None:
            self.model.lm.freeze()
        if cfg.peft_lm:
            from .lora import attach

            self.model.lm.freeze()
            attach(self.model,
                   LoraConfig(rank=cfg.peft_rank, alpha=float(cfg.peft_rank), targets=("lm",)),
                   seed=lora_seed, freeze_scope="wrapped")

    # -- single-step interface ------------------------------------------------

    def _schedule(self, n_utts: int):
        batches_per_epoch = math.ceil(n_utts / self.cfg.batch_size)
        steps_per_epoch = math.ceil(batches_per_epoch / self.cfg.grad_accum)
        self.total_steps = self.cfg.epochs * steps_per_epoch
        self.warmup_steps = max(1, round(self.cfg.warmup_frac * steps_per_epoch))

    def _check_finite(self, value: float, batch: Batch):
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at step {self.step_idx + 1}, "
                f"utterances {batch.utt_ids}"
            )

    def train_step(self, micro_batches: list[Batch]) -> StepRecord:
        """One optimizer step over accumulated micro-batches."""
        cfg = self.cfg
        for p in self.params.values():
            p.zero_grad()
        lm_counts = [self.model.lm_mask_count(b) if cfg.mode == "joint" else 0
                     for b in micro_batches]
        utt_counts = [len(b.utt_ids) for b in micro_batches]
        lm_total = sum(lm_counts) or 1
        utt_total = sum(utt_counts)
        agg_lm, agg_ctc = 0.0, 0.0
        saw_lm = saw_ctc = False
        for b, lm_n, utt_n in zip(micro_batches, lm_counts, utt_counts):
            loss_lm, loss_ctc, _ = self.model.forward_batch(b, lambda_ctc=cfg.lambda_ctc)
            parts = []
            if loss_lm is not None:
                parts.append(loss_lm * (lm_n / lm_total))
                agg_lm += loss_lm.item() * (lm_n / lm_total)
                saw_lm = True
            if loss_ctc is not None and (cfg.mode == "ctc_only" or cfg.lambda_ctc > 0):
                weight = utt_n / utt_total
                scale = 1.0 if cfg.mode == "ctc_only" else cfg.lambda_ctc
                parts.append(loss_ctc * (scale * weight))
                agg_ctc += loss_ctc.item() * weight
                saw_ctc = True
            contribution = parts[0] if len(parts) == 1 else parts[0] + parts[1]
            self._check_finite(contribution.item(), b)
            contribution.backward(leaves=self.params.values())
        if cfg.mode == "ctc_only":
            total = agg_ctc
        else:
            total = agg_lm + (cfg.lambda_ctc * agg_ctc if saw_ctc else 0.0)
        self.step_idx += 1
        lr = lr_at(self.step_idx, peak_lr=cfg.peak_lr,
                   warmup_steps=self.warmup_steps, total_steps=self.total_steps)
        self.opt.step(lr)
        return StepRecord(
            step=self.step_idx,
            lr=lr,
            loss_lm=agg_lm if saw_lm else None,
            loss_ctc=agg_ctc if saw_ctc else None,
            total=total,
        )

    # -- epoch loop ------------------------------------------------------------

    def train(self, dataset, log_path=None) -> list[StepRecord]:
        """dataset: list of (waveform samples, text ids, utt id)."""
        if not dataset:
            raise ValueError("training dataset is empty")
        cfg = self.cfg
        self._schedule(len(dataset))
        records = []
        log_f = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            if log_f:
                log_f.write(LOG_HEADER + "\n")
            for epoch in range(cfg.epochs):
                rng = np.random.default_rng([cfg.seed, 11, epoch])
                batches = bucket_batches(dataset, cfg.batch_size, rng)
                for i in range(0, len(batches), cfg.grad_accum):
                    group = batches[i:i + cfg.grad_accum]
                    micro = [
                        collate(
                            [dataset[j][0] for j in idxs],
                            [dataset[j][1] for j in idxs],
                            [dataset[j][2] for j in idxs],
                        )
                        for idxs in group
                    ]
                    rec = self.train_step(micro)
                    records.append(rec)
                    if log_f:
                        log_f.write(rec.line() + "\n")
        finally:
            if log_f:
                log_f.close()
        return records
