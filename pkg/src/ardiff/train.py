"""Training: sample (x, y), embed, draw a sentence timestep, noise per token, regress z_0."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data import PAD
from .diffusion import TrainingBatch, embed_step, forward_noise, training_loss
from .model import Denoiser, save_checkpoint
from .schedule import NoiseSchedule, TimestepPlan

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    lr_schedule: str = "cosine"     # cosine | constant
    warmup_steps: int = 200
    batch_size: int = 64
    max_steps: int = 2000
    grad_accum: int = 1
    seed: int = 0
    anchor_n: float = 0.0           # 0 -> 2N
    anchor_t: float = 0.0           # 0 -> T
    total_steps: int = 100
    target_len: int = 8
    grad_clip: float = 1.0
    log_every: int = 1
    timing: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.warmup_steps < 0 or self.grad_clip < 0:
            raise ValueError("lr, warmup_steps and grad_clip must be non-negative")
        for name in ("batch_size", "max_steps", "grad_accum", "total_steps", "target_len", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @property
    def anchor(self):
        return (self.anchor_n or 2.0 * self.target_len, self.anchor_t or float(self.total_steps))


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to 0 at ``max_steps`` (or flat)."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return cfg.lr
    span = max(cfg.max_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sample_batch(src: torch.Tensor, tgt: torch.Tensor, plan: TimestepPlan, batch_size: int,
                 rng: np.random.Generator, gen: torch.Generator, dim: int) -> TrainingBatch:
    """Uniform example draw and uniform integer sentence timestep over [0, max_t]."""
    idx = rng.integers(0, src.shape[0], size=batch_size)
    t = rng.integers(0, plan.max_t + 1, size=batch_size)
    noise = torch.randn((2, batch_size, tgt.shape[1], dim), generator=gen)
    return TrainingBatch(src[idx], tgt[idx], t, noise)


def batch_loss(model: Denoiser, batch: TrainingBatch, plan: TimestepPlan, schedule: NoiseSchedule):
    emb_noise, diff_noise = batch.noise[0], batch.noise[1]
    z0 = embed_step(batch.tgt_ids, model.embedding_matrix, schedule, noise=emb_noise).latents
    zt = forward_noise(z0, plan, batch.sentence_t, schedule, noise=diff_noise)
    z0_hat = model(zt.latents, zt.token_steps, batch.src_ids)
    logits = model.round_logits(z0)
    return training_loss(z0_hat, z0, logits, batch.tgt_ids, mask=batch.tgt_ids != PAD)


@dataclass
class TrainResult:
    model: Denoiser
    records: List[dict]
    checkpoint: Optional[Path] = None


def train_loop(cfg: TrainConfig, src: torch.Tensor, tgt: torch.Tensor, model: Denoiser,
               plan: TimestepPlan, schedule: NoiseSchedule, out_dir=None,
               vocab_tokens: Sequence[str] = (), extra: Optional[dict] = None) -> TrainResult:
    """Optimise ``model`` on the encoded corpus (``src`` (B, S), ``tgt`` (B, N)).

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per logged
    step) and ``checkpoint.pt``. A NaN loss or a loss above 1e4 restores the
    last good parameters, writes them out and raises TrainingDiverged.
    """
    if src.shape[0] == 0:
        raise ValueError("empty corpus")
    if tgt.shape[1] != plan.target_len:
        raise ValueError(f"targets have length {tgt.shape[1]} but the plan expects {plan.target_len}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    ckpt_path = out / "checkpoint.pt" if out is not None else None
    extra = dict(extra or {})
    records = []
    good_state = copy.deepcopy(model.state_dict())
    t_start = time.perf_counter()
    model.train()
    try:
        for step in range(cfg.max_steps):
            lr = lr_schedule(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            tot = mse = nll = 0.0
            for _ in range(cfg.grad_accum):
                batch = sample_batch(src, tgt, plan, cfg.batch_size, rng, gen, model.cfg.embed_dim)
                parts = batch_loss(model, batch, plan, schedule)
                loss_val = parts.total.item()
                if not math.isfinite(loss_val) or loss_val > DIVERGENCE_LIMIT:
                    model.load_state_dict(good_state)
                    if ckpt_path is not None:
                        save_checkpoint(ckpt_path, model, vocab_tokens, extra)
                    raise TrainingDiverged(f"loss {loss_val} at step {step}", ckpt_path)
                (parts.total / cfg.grad_accum).backward()
                tot += loss_val / cfg.grad_accum
                mse += parts.mse.item() / cfg.grad_accum
                nll += parts.nll.item() / cfg.grad_accum
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            if lr > 0:
                opt.step()
            good_state = copy.deepcopy(model.state_dict())
            if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
                elapsed = (time.perf_counter() - t_start) * 1000.0 if cfg.timing else 0.0
                rec = {"step": step, "loss": round(tot, 6), "mse": round(mse, 6), "nll": round(nll, 6),
                       "lr": lr, "elapsed_ms": round(elapsed, 3)}
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                if step % 500 == 0:
                    log.info("step %d loss %.4f (mse %.4f nll %.4f) lr %.2e", step, tot, mse, nll, lr)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    model.eval()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, vocab_tokens, extra)
    return TrainResult(model, records, ckpt_path)
