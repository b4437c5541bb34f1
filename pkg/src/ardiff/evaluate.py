"""Quality and diversity metrics plus the few-step degradation report.

BLEU here uses add-one smoothing on every n-gram order:

    p_n  = (clipped matches_n + 1) / (hypothesis n-grams_n + 1)
    BP   = 1 if c > r else exp(1 - r / c)
    BLEU = 100 * BP * exp(mean_n log p_n)

where c is the hypothesis length and r the closest reference length (ties
resolve to the shorter reference). Corpus BLEU sums the counts and lengths over
all segments before applying the same formula. An empty hypothesis scores 0.
"""
from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Sequence]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _segment_stats(hyp: Sequence, refs: Sequence[Sequence], max_n: int):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h = ngram_counts(hyp, n)
        best = Counter()
        for r in refs:
            best |= ngram_counts(r, n)
        matches.append(sum(min(c, best[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals, len(hyp), _closest_ref_len(len(hyp), refs)


def _score(matches, totals, hyp_len, ref_len) -> float:
    if hyp_len == 0:
        return 0.0
    log_p = sum(math.log((m + 1) / (t + 1)) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bleu(hyp: Sequence, ref, max_n: int = 4) -> float:
    """Sentence BLEU in [0, 100]; ``ref`` may be one sequence or a list of sequences."""
    refs = _as_refs(ref)
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("references must be non-empty")
    return _score(*_segment_stats(list(hyp), refs, max_n))


def _as_refs(ref):
    ref = list(ref)
    if ref and isinstance(ref[0], (list, tuple)):
        return [list(r) for r in ref]
    return [ref]


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence, max_n: int = 4) -> float:
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    matches = np.zeros(max_n, dtype=np.int64)
    totals = np.zeros(max_n, dtype=np.int64)
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        m, t, hl, rl = _segment_stats(list(hyp), _as_refs(ref), max_n)
        matches += m
        totals += t
        c += hl
        r += rl
    return _score(matches.tolist(), totals.tolist(), c, r)


def self_bleu(candidates: Sequence[Sequence], max_n: int = 4) -> float:
    """Mean BLEU of each candidate against all the others; lower means more diverse."""
    if len(candidates) < 2:
        raise ValueError("self_bleu needs at least two candidates")
    scores = []
    for i, c in enumerate(candidates):
        others = [o for j, o in enumerate(candidates) if j != i]
        scores.append(bleu(c, others, max_n) if len(c) else 0.0)
    return float(np.mean(scores))


def exact_match(hyps: Sequence[Sequence], refs: Sequence) -> float:
    """Fraction of hypotheses equal to (one of) their reference(s)."""
    if not hyps:
        return 0.0
    return sum(list(h) in _as_refs(r) for h, r in zip(hyps, refs)) / len(hyps)


def token_accuracy(hyp_rows, ref_rows, mask=None) -> float:
    """Fraction of positions where ``hyp_rows`` equals ``ref_rows`` (arrays), over ``mask``."""
    hyp_rows, ref_rows = np.asarray(hyp_rows), np.asarray(ref_rows)
    if mask is None:
        mask = np.ones_like(ref_rows, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return float((hyp_rows == ref_rows)[mask].mean())


@dataclass
class StepRow:
    plan: str
    steps: int
    bleu: float
    exact_match: float
    bleu_drop: float = 0.0
    em_drop: float = 0.0
    avg_drop: float = 0.0
    seconds_per_step: float = 0.0


@dataclass
class EvalReport:
    bleu: float
    exact_match: float
    self_bleu: Optional[float]
    rows: List[StepRow] = field(default_factory=list)
    runtime_per_step: float = 0.0

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "exact_match": self.exact_match,
            "self_bleu": self.self_bleu,
            "runtime_per_step": self.runtime_per_step,
            "few_step": [vars(r) for r in self.rows],
        }


def _drops(rows: List[StepRow]):
    """Fill the drop columns relative to the first row of each plan."""
    base: Dict[str, StepRow] = {}
    for r in rows:
        ref = base.setdefault(r.plan, r)
        r.bleu_drop = ref.bleu - r.bleu
        r.em_drop = 100.0 * (ref.exact_match - r.exact_match)
        r.avg_drop = 0.5 * (r.bleu_drop + r.em_drop)


def few_step_report(systems: Dict[str, Tuple], corpus_src, corpus_refs, step_counts=(20, 3, 2),
                    candidates: int = 1, seed: int = 0, timing: bool = True) -> EvalReport:
    """Score each (model, timestep plan) system at every decoding step count.

    ``systems`` maps a name to ``(model, TimestepPlan)`` or
    ``(model, TimestepPlan, NoiseSchedule)``. Drops are measured
    against the first entry of ``step_counts`` within each system; ``avg_drop``
    averages the BLEU drop and the exact-match drop (in points).
    """
    from .infer import decode_corpus, make_plan

    rows = []
    for name, system in systems.items():
        model, tplan = system[:2]
        schedule = system[2] if len(system) > 2 else None
        for m in step_counts:
            iplan = make_plan(tplan, m, candidates, seed, schedule)
            t0 = time.perf_counter()
            hyps = decode_corpus(model, corpus_src, iplan)
            elapsed = (time.perf_counter() - t0) / m if timing else 0.0
            rows.append(StepRow(name, m, corpus_bleu(hyps, corpus_refs),
                                exact_match(hyps, corpus_refs), seconds_per_step=elapsed))
    _drops(rows)
    head = rows[0] if rows else None
    return EvalReport(bleu=head.bleu if head else 0.0, exact_match=head.exact_match if head else 0.0,
                      self_bleu=None, rows=rows,
                      runtime_per_step=head.seconds_per_step if head else 0.0)


def rows_to_csv(rows: Sequence[StepRow]) -> str:
    cols = ["plan", "steps", "bleu", "exact_match", "bleu_drop", "em_drop", "avg_drop", "seconds_per_step"]
    lines = [",".join(cols)]
    for r in rows:
        vals = [getattr(r, c) for c in cols]
        lines.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals))
    return "\n".join(lines) + "\n"
