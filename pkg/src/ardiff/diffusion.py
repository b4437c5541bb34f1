"""Embedding-space forward noising, the skipping reverse posterior and the training loss.

Latents are torch tensors of shape ``(..., N, d)``; token-level timesteps are
integer tensors of shape ``(..., N)``. Coefficient tables live in float64 and
are cast to the latent dtype at the point of use.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, TimestepPlan


@dataclass
class LatentSequence:
    latents: torch.Tensor       # (..., N, d)
    token_steps: torch.Tensor   # (..., N) int64
    sentence_t: Union[int, torch.Tensor]


class PosteriorCoeffs(NamedTuple):
    lam: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class TrainingBatch:
    src_ids: torch.Tensor
    tgt_ids: torch.Tensor
    sentence_t: np.ndarray
    noise: torch.Tensor


def skip_coefficients(abar_prev, abar_next) -> PosteriorCoeffs:
    """lam, mu, sigma of q(z_next | z_prev, z_0) for arbitrary cumulative coefficients.

    Requires abar_prev <= abar_next (the destination is less noisy). Entries with
    abar_prev == abar_next get the identity triple (1, 0, 0).
    """
    ap = np.asarray(abar_prev, dtype=np.float64)
    an = np.asarray(abar_next, dtype=np.float64)
    ap, an = np.broadcast_arrays(ap, an)
    if np.any(ap > an):
        raise ValueError("destination timestep is noisier than the source")
    same = ap == an
    ratio = ap / an
    denom = np.where(same, 1.0, 1.0 - ap)
    lam = np.where(same, 1.0, np.sqrt(ratio) * (1.0 - an) / denom)
    mu = np.where(same, 0.0, np.sqrt(an) * (1.0 - ratio) / denom)
    sigma = np.where(same, 0.0, (1.0 - ratio) * (1.0 - an) / denom)
    return PosteriorCoeffs(lam, mu, np.maximum(sigma, 0.0))


def posterior_coeffs(schedule: NoiseSchedule, step_prev, step_next) -> PosteriorCoeffs:
    """Coefficients for jumping from token timestep ``step_prev`` down to ``step_next``."""
    sp = np.asarray(step_prev)
    sn = np.asarray(step_next)
    T = schedule.total_steps
    if np.any(sn > sp):
        raise ValueError(f"step_next {step_next} exceeds step_prev {step_prev}")
    if np.any(sn < 0) or np.any(sp > T):
        raise ValueError(f"token timesteps must lie in [0, {T}]")
    return skip_coefficients(schedule.alpha_bar[sp], schedule.alpha_bar[sn])


def _gather(table: np.ndarray, steps: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Look up a float64 table at ``steps`` and reshape to broadcast over the last latent dim."""
    vals = torch.from_numpy(np.array(table))[steps.cpu()]
    return vals.to(dtype=like.dtype, device=like.device).unsqueeze(-1)


def _standard_normal(like: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
    return torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)


def embed_step(tgt_ids: torch.Tensor, embedding: torch.Tensor, schedule: NoiseSchedule,
               generator: Optional[torch.Generator] = None,
               noise: Optional[torch.Tensor] = None) -> LatentSequence:
    """z_0 = Emb(y) + sqrt(1 - alpha_0) * eps."""
    if tgt_ids.numel() and (tgt_ids.min() < 0 or tgt_ids.max() >= embedding.shape[0]):
        raise ValueError("target id outside the vocabulary")
    mean = F.embedding(tgt_ids, embedding)
    if noise is None:
        noise = _standard_normal(mean, generator)
    z0 = mean + (1.0 - schedule.embed_alpha) ** 0.5 * noise
    return LatentSequence(z0, torch.zeros_like(tgt_ids), 0)


def forward_noise(z0: torch.Tensor, plan: TimestepPlan, sentence_t, schedule: NoiseSchedule,
                  generator: Optional[torch.Generator] = None,
                  noise: Optional[torch.Tensor] = None) -> LatentSequence:
    """Sample z_t position by position at token-level timesteps f(n, t).

    ``sentence_t`` is a scalar or an array matching the batch dims of ``z0``.
    """
    if isinstance(z0, LatentSequence):
        z0 = z0.latents
    t_arr = np.asarray(sentence_t.cpu() if torch.is_tensor(sentence_t) else sentence_t)
    steps = torch.from_numpy(plan.token_timesteps(t_arr)).to(z0.device)
    steps = steps.expand(z0.shape[:-1])
    if noise is None:
        noise = _standard_normal(z0, generator)
    zt = (_gather(schedule.sqrt_alpha_bar, steps, z0) * z0
          + _gather(schedule.sqrt_one_minus_alpha_bar, steps, z0) * noise)
    return LatentSequence(zt, steps, sentence_t)


def reverse_step(z_prev: LatentSequence, z0_hat: torch.Tensor, plan: TimestepPlan,
                 schedule: NoiseSchedule, t_from, t_to,
                 generator: Optional[torch.Generator] = None,
                 noise: Optional[torch.Tensor] = None) -> LatentSequence:
    """One skipping step from sentence timestep ``t_from`` down to ``t_to``.

    Each position n moves from f(n, t_from) to f(n, t_to) through
    N(lam * z + mu * z0_hat, sigma I). Positions landing on token timestep 0
    receive the posterior mean without noise.
    """
    if t_to >= t_from:
        raise ValueError(f"reverse step must decrease the timestep ({t_from} -> {t_to})")
    z = z_prev.latents
    steps_from = torch.from_numpy(plan.token_timesteps(t_from)).expand(z.shape[:-1])
    steps_to = torch.from_numpy(plan.token_timesteps(t_to)).expand(z.shape[:-1])
    if not torch.equal(z_prev.token_steps.cpu(), steps_from):
        raise ValueError("z_prev token timesteps do not match the plan at t_from")
    coeffs = posterior_coeffs(schedule, steps_from.numpy(), steps_to.numpy())
    lam = torch.from_numpy(coeffs.lam).to(z).unsqueeze(-1)
    mu = torch.from_numpy(coeffs.mu).to(z).unsqueeze(-1)
    std = torch.from_numpy(np.sqrt(coeffs.sigma)).to(z).unsqueeze(-1)
    mean = lam * z + mu * z0_hat
    if noise is None:
        noise = _standard_normal(z, generator)
    std = torch.where(steps_to.to(z.device).unsqueeze(-1) == 0, torch.zeros_like(std), std)
    return LatentSequence(mean + std * noise, steps_to.to(z.device), t_to)


class LossParts(NamedTuple):
    total: torch.Tensor
    mse: torch.Tensor
    nll: torch.Tensor


def training_loss(z0_hat: torch.Tensor, z0: torch.Tensor, logits: torch.Tensor,
                  tgt_ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> LossParts:
    """Per-token averages of ||z0_hat - z0||^2 and -log p(y | z0); masked positions are ignored."""
    for name, x in (("z0_hat", z0_hat), ("z0", z0), ("logits", logits)):
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite values in {name}")
    if z0_hat.shape != z0.shape or logits.shape[:-1] != tgt_ids.shape:
        raise ValueError("shape mismatch in training_loss")
    if mask is None:
        mask = torch.ones_like(tgt_ids, dtype=z0.dtype)
    mask = mask.to(z0.dtype)
    count = mask.sum().clamp_min(1.0)
    sq = ((z0_hat - z0) ** 2).sum(-1)
    mse = (sq * mask).sum() / count
    token_nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt_ids.reshape(-1),
                                reduction="none").view_as(mask)
    nll = (token_nll * mask).sum() / count
    return LossParts(mse + nll, mse, nll)
