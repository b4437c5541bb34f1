"""A small encoder-decoder denoiser with per-token timestep conditioning."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "ardiff-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_src_len: int = 16
    max_tgt_len: int = 16
    dropout: float = 0.2

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "layers", "heads", "ffn_dim", "max_src_len", "max_tgt_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def timestep_embedding(steps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer timesteps; output shape ``steps.shape + (dim,)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = steps.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """g_theta(z_t, f(., t); x): predicts z_0 for every target position.

    The diffusion embedding matrix (``self.embedding.weight``) is the same tensor
    used by the rounding head, so updates to one are seen by the other.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embedding = nn.Embedding(cfg.vocab_size, d)
        self.src_embed = nn.Embedding(cfg.vocab_size, d)
        self.src_pos = nn.Embedding(cfg.max_src_len, d)
        self.tgt_pos = nn.Embedding(cfg.max_tgt_len, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.SiLU(), nn.Linear(cfg.ffn_dim, d))
        self.in_proj = nn.Linear(d, d)
        enc_layer = nn.TransformerEncoderLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout,
                                               activation="gelu", batch_first=True, norm_first=True)
        dec_layer = nn.TransformerDecoderLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout,
                                               activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, cfg.layers, norm=nn.LayerNorm(d),
                                             enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.layers, norm=nn.LayerNorm(d))
        self.out_proj = nn.Linear(d, d)
        self.drop = nn.Dropout(cfg.dropout)

    @property
    def embedding_matrix(self) -> torch.Tensor:
        return self.embedding.weight

    def encode(self, src_ids: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(src_ids.shape[-1], device=src_ids.device)
        h = self.drop(self.src_embed(src_ids) + self.src_pos(pos))
        return self.encoder(h, src_key_padding_mask=~src_mask)

    def forward(self, z_t: torch.Tensor, token_steps: torch.Tensor, src_ids: torch.Tensor,
                src_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """z_t (B, N, d), token_steps (B, N), src_ids (B, S) -> z0_hat (B, N, d).

        ``src_mask`` is True on real source tokens; by default every id other
        than 0 (pad) is real.
        """
        if src_mask is None:
            src_mask = src_ids != 0
        if z_t.shape[-1] != self.cfg.embed_dim or z_t.shape[:-1] != token_steps.shape:
            raise ValueError(f"latent shape {tuple(z_t.shape)} does not match timesteps {tuple(token_steps.shape)}")
        memory = self.encode(src_ids, src_mask)
        pos = torch.arange(z_t.shape[-2], device=z_t.device)
        temb = self.time_mlp(timestep_embedding(token_steps, self.cfg.embed_dim).to(z_t.dtype))
        h = self.drop(self.in_proj(z_t) + temb + self.tgt_pos(pos))
        h = self.decoder(h, memory, memory_key_padding_mask=~src_mask)
        out = self.out_proj(h)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in denoiser output")
        return out

    def round_logits(self, z0_hat: torch.Tensor) -> torch.Tensor:
        """Tied rounding head: logits[n] = z0_hat[n] @ E^T."""
        return z0_hat @ self.embedding.weight.t()

    def nearest_embedding(self, z: torch.Tensor) -> torch.Tensor:
        """Id of the closest embedding row (squared Euclidean); ties go to the lower id."""
        emb = self.embedding.weight
        dist = ((z.unsqueeze(-2) - emb) ** 2).sum(-1)
        # torch.argmin returns the first minimal index
        return dist.argmin(dim=-1)


def denoise(model: Denoiser, z_t, src_ids: torch.Tensor, src_mask=None) -> torch.Tensor:
    """Functional wrapper accepting a LatentSequence or (latents, steps) with optional batch dims."""
    latents, steps = (z_t.latents, z_t.token_steps) if hasattr(z_t, "latents") else z_t
    single = latents.dim() == 2
    if single:
        latents, steps, src_ids = latents[None], steps[None], src_ids[None]
        src_mask = None if src_mask is None else src_mask[None]
    out = model(latents, steps, src_ids, src_mask)
    return out[0] if single else out


def flat_params(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat_params(model: nn.Module, vec: torch.Tensor):
    nn.utils.vector_to_parameters(vec, model.parameters())


def backward(model: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> torch.Tensor:
    """Gradient of ``loss_fn()`` w.r.t. all parameters as one flat vector."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss.item()}")
    loss.backward()
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]
    flat = torch.cat([g.reshape(-1) for g in grads])
    if not torch.isfinite(flat).all():
        raise FloatingPointError("non-finite gradient")
    return flat


def vocab_hash(tokens: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


def save_checkpoint(path, model: Denoiser, vocab_tokens: Sequence[str], extra: Optional[dict] = None):
    """Write config header, parameters and vocabulary hash with ``torch.save``.

    Layout (a plain dict): ``format``, ``model_config`` (dict), ``state_dict``
    (name -> tensor), ``vocab`` (token list, id order), ``vocab_sha256`` and
    ``extra`` (JSON-compatible metadata such as the timestep plan).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "vocab": list(vocab_tokens),
        "vocab_sha256": vocab_hash(vocab_tokens),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (model in eval mode, vocab tokens, extra)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unrecognised checkpoint format {payload.get('format')!r}")
    if vocab_hash(payload["vocab"]) != payload["vocab_sha256"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    model = Denoiser(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["vocab"], payload["extra"]
