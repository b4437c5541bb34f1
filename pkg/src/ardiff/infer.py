"""Skipping inference, multi-candidate generation and MBR selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import trim
from .diffusion import LatentSequence, reverse_step
from .evaluate import bleu
from .model import Denoiser
from .schedule import NoiseSchedule, TimestepPlan, build_sqrt_schedule


def timestep_subsequence(max_t: int, steps: int) -> List[int]:
    """``steps + 1`` integers spaced linearly from ``max_t`` down to 0 (nearest-integer)."""
    if steps < 1:
        raise ValueError("need at least one decoding step")
    if steps > max_t:
        raise ValueError(f"{steps} decoding steps exceed the {max_t} available timesteps")
    return [int(np.floor(max_t * (steps - i) / steps + 0.5)) for i in range(steps + 1)]


@dataclass(frozen=True)
class InferencePlan:
    plan: TimestepPlan
    subsequence: Tuple[int, ...]
    candidates: int = 1
    seed: int = 0
    schedule: Optional[NoiseSchedule] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        seq = self.subsequence
        if len(seq) < 2 or seq[0] != self.plan.max_t or seq[-1] != 0:
            raise ValueError("subsequence must run from the plan's max timestep to 0")
        if any(a <= b for a, b in zip(seq, seq[1:])):
            raise ValueError("subsequence must be strictly decreasing")
        if self.candidates < 1:
            raise ValueError("need at least one candidate")
        if self.schedule is None:
            object.__setattr__(self, "schedule", build_sqrt_schedule(self.plan.total_steps))

    @property
    def steps(self) -> int:
        return len(self.subsequence) - 1


def make_plan(plan: TimestepPlan, steps: int, candidates: int = 1, seed: int = 0,
              schedule: Optional[NoiseSchedule] = None) -> InferencePlan:
    return InferencePlan(plan, tuple(timestep_subsequence(plan.max_t, steps)), candidates, seed, schedule)


@dataclass
class TraceStep:
    step: int
    sentence_t: int
    token_steps: List[int]
    argmax_ids: List[int]
    max_logits: List[float]


@dataclass
class GenerationTrace:
    steps: List[TraceStep] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def argmax_matrix(self) -> np.ndarray:
        """(M + 1, N) argmax ids over the decoding steps."""
        return np.array([s.argmax_ids for s in self.steps])


def _draw(generators: Sequence[torch.Generator], shape, dtype) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])


@torch.no_grad()
def sample_batch(model: Denoiser, src_ids: torch.Tensor, iplan: InferencePlan,
                 seeds: Sequence[int], trace: bool = False):
    """Run the reverse chain for every row of ``src_ids`` with its own rng seed.

    Returns ``(ids (B, N), traces)``; ``traces`` is a list of GenerationTrace
    (one per row) when ``trace`` is set, else None.
    """
    tplan, schedule = iplan.plan, iplan.schedule
    if model.cfg.max_tgt_len < tplan.target_len:
        raise ValueError("model target length is shorter than the plan's")
    was_training = model.training
    model.eval()
    try:
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        N, d = tplan.target_len, model.cfg.embed_dim
        dtype = model.embedding.weight.dtype
        seq = iplan.subsequence
        z = _draw(gens, (N, d), dtype)
        steps0 = torch.from_numpy(tplan.token_timesteps(seq[0])).expand(z.shape[:-1])
        state = LatentSequence(z, steps0, seq[0])
        traces = [GenerationTrace() for _ in seeds] if trace else None
        if trace:
            _record(model, state, 0, traces)
        for i in range(iplan.steps):
            z0_hat = model(state.latents, state.token_steps, src_ids)
            noise = _draw(gens, (N, d), dtype)
            state = reverse_step(state, z0_hat, tplan, schedule, seq[i], seq[i + 1], noise=noise)
            if trace:
                _record(model, state, i + 1, traces)
        ids = model.nearest_embedding(state.latents)
    finally:
        model.train(was_training)
    return ids, traces


def _record(model: Denoiser, state: LatentSequence, step: int, traces: List[GenerationTrace]):
    logits = model.round_logits(state.latents)
    top, arg = logits.max(dim=-1)
    for b, tr in enumerate(traces):
        tr.steps.append(TraceStep(step, int(state.sentence_t), state.token_steps[b].tolist(),
                                  arg[b].tolist(), [round(float(x), 6) for x in top[b]]))


def generate(model: Denoiser, src_ids: torch.Tensor, iplan: InferencePlan, seed: Optional[int] = None):
    """Decode one source sequence (1-D ids); returns (ids of length N, GenerationTrace)."""
    seed = iplan.seed if seed is None else seed
    ids, traces = sample_batch(model, src_ids[None], iplan, [seed], trace=True)
    return ids[0], traces[0]


def generate_candidates(model: Denoiser, src_ids: torch.Tensor, iplan: InferencePlan,
                        base_seed: Optional[int] = None) -> List[List[int]]:
    """k trimmed candidates using seeds base_seed, base_seed + 1, ..."""
    base_seed = iplan.seed if base_seed is None else base_seed
    k = iplan.candidates
    ids, _ = sample_batch(model, src_ids[None].expand(k, -1), iplan, [base_seed + j for j in range(k)])
    return [trim(row.tolist()) for row in ids]


def bleu_similarity(a: Sequence, b: Sequence) -> float:
    """Sentence BLEU scaled to [0, 1]; two empty sequences count as identical."""
    if not len(b):
        return 1.0 if not len(a) else 0.0
    return bleu(a, b) / 100.0


def mbr_select(candidates: Sequence[Sequence], metric: Callable[[Sequence, Sequence], float] = bleu_similarity):
    """Minimum Bayes risk choice: risk_i = mean_{j != i} (1 - metric(c_i, c_j)).

    Returns (index, risks); ties go to the lowest index.
    """
    k = len(candidates)
    if k == 0:
        raise ValueError("no candidates to select from")
    if k == 1:
        return 0, [0.0]
    risks = []
    for i in range(k):
        r = sum(1.0 - metric(candidates[i], candidates[j]) for j in range(k) if j != i)
        risks.append(r / (k - 1))
    return int(np.argmin(risks)), risks


def decode_corpus(model: Denoiser, src_ids: torch.Tensor, iplan: InferencePlan,
                  return_candidates: bool = False, batch_size: int = 512):
    """Decode every row of ``src_ids`` (B, S); with k > 1 candidates, pick by MBR.

    Candidate j of every example uses seed ``iplan.seed + j``.
    """
    k = iplan.candidates
    rows = src_ids.repeat_interleave(k, dim=0)
    seeds = [iplan.seed + j for _ in range(src_ids.shape[0]) for j in range(k)]
    out = []
    for start in range(0, rows.shape[0], batch_size):
        ids, _ = sample_batch(model, rows[start:start + batch_size], iplan, seeds[start:start + batch_size])
        out.extend(trim(r.tolist()) for r in ids)
    hyps, details = [], []
    for b in range(src_ids.shape[0]):
        cands = out[b * k:(b + 1) * k]
        idx, risks = mbr_select(cands)
        hyps.append(cands[idx])
        details.append((cands, idx, risks))
    return (hyps, details) if return_candidates else hyps


def stabilization_steps(trace: GenerationTrace) -> np.ndarray:
    """Per position, the first step index after which the argmax id never changes."""
    ids = trace.argmax_matrix()
    final = ids[-1]
    last = ids.shape[0] - 1
    out = np.zeros(ids.shape[1], dtype=np.int64)
    for n in range(ids.shape[1]):
        changed = np.nonzero(ids[:, n] != final[n])[0]
        out[n] = changed[-1] + 1 if len(changed) else 0
        out[n] = min(out[n], last)
    return out
