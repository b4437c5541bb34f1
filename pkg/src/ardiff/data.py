"""Tokenization, vocabulary, JSONL corpora and synthetic seq2seq tasks."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SYNTH_KINDS = ("copy", "reverse", "sort", "copy_or_reverse")


class DataError(ValueError):
    pass


def tokenize(text, mode: str = "whitespace") -> List[str]:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"invalid UTF-8 input: {e}") from None
    if mode == "whitespace":
        return text.split()
    if mode == "char":
        return list(text)
    raise DataError(f"unknown tokenize mode {mode!r}")


def detokenize(tokens: Sequence[str], mode: str = "whitespace") -> str:
    return ("" if mode == "char" else " ").join(tokens)


class Vocabulary:
    """Bijective token <-> id map with pad/bos/eos/unk at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]]) -> "Vocabulary":
        seen = set()
        for seq in sequences:
            seen.update(seq)
        seen -= set(RESERVED)
        return cls(list(RESERVED) + sorted(seen))

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        """Vocabulary of the synthetic tasks: token ``str(i)`` has id ``i``."""
        return cls(list(RESERVED) + [str(i) for i in range(4, vocab_size)])

    def __len__(self):
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(tok, UNK) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class ParallelCorpus:
    pairs: List[Tuple[List[str], List[str]]]
    max_src_len: int
    max_tgt_len: int

    def __post_init__(self):
        for src, tgt in self.pairs:
            if not tgt:
                raise DataError("empty target sequence")
            if len(src) > self.max_src_len or len(tgt) > self.max_tgt_len:
                raise DataError(f"pair exceeds configured lengths: {src} -> {tgt}")

    def __len__(self):
        return len(self.pairs)

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]


def synth_task(kind: str, vocab_size: int, max_len: int, count: int, seed: int,
               min_len: int = 1) -> ParallelCorpus:
    """Random source sequences over ids 4..V-1 with lengths in [min_len, max_len].

    ``copy_or_reverse`` picks the copy or the reversal with equal probability
    per example, giving a two-mode target distribution.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic task {kind!r}")
    if vocab_size <= 4 or max_len < 1 or not 1 <= min_len <= max_len:
        raise DataError("synth_task needs V > 4 and 1 <= min_len <= N")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        src = [int(x) for x in rng.integers(4, vocab_size, size=length)]
        if kind == "copy":
            tgt = list(src)
        elif kind == "reverse":
            tgt = src[::-1]
        elif kind == "copy_or_reverse":
            tgt = list(src) if rng.random() < 0.5 else src[::-1]
        else:
            tgt = sorted(src)
        pairs.append(([str(x) for x in src], [str(x) for x in tgt]))
    return ParallelCorpus(pairs, max_len, max_len)


def read_jsonl(path, mode: str = "whitespace", max_src_len: int = 0, max_tgt_len: int = 0) -> ParallelCorpus:
    """Load ``{"src": str, "tgt": str}`` lines; zero maxima mean 'use the longest seen'."""
    pairs = []
    try:
        with open(path, "rb") as fh:
            for lineno, raw in enumerate(fh, 1):
                if not raw.strip():
                    continue
                try:
                    obj = json.loads(raw.decode("utf-8"))
                    pairs.append((tokenize(obj["src"], mode), tokenize(obj["tgt"], mode)))
                except (ValueError, KeyError, TypeError) as e:
                    raise DataError(f"{path}:{lineno}: {e}") from None
    except OSError as e:
        raise DataError(str(e)) from None
    if not pairs:
        raise DataError(f"{path}: corpus is empty")
    max_src_len = max_src_len or max(len(s) for s, _ in pairs)
    max_tgt_len = max_tgt_len or max(len(t) for _, t in pairs)
    return ParallelCorpus(pairs, max_src_len, max_tgt_len)


def write_jsonl(path, corpus: ParallelCorpus, mode: str = "whitespace"):
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in corpus.pairs:
            fh.write(json.dumps({"src": detokenize(src, mode), "tgt": detokenize(tgt, mode)}) + "\n")


def group_references(corpus: ParallelCorpus):
    """Unique sources in first-seen order, each with every distinct target it maps to."""
    refs = {}
    for src, tgt in corpus.pairs:
        bucket = refs.setdefault(tuple(src), [])
        if list(tgt) not in bucket:
            bucket.append(list(tgt))
    return [list(s) for s in refs], list(refs.values())


def pad_sources(seqs: Sequence[Sequence[int]], length: int) -> torch.Tensor:
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise DataError(f"source of length {len(s)} exceeds {length}")
        out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def pad_targets(seqs: Sequence[Sequence[int]], length: int) -> torch.Tensor:
    """Right-pad to ``length``; eos follows the tokens whenever it fits."""
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise DataError(f"target of length {len(s)} exceeds {length}")
        row = list(s) + [EOS]
        row = row[:length]
        out[i, :len(row)] = torch.tensor(row, dtype=torch.long)
    return out


def trim(ids: Sequence[int]) -> List[int]:
    """Cut a decoded id row at the first eos or pad."""
    out = []
    for i in ids:
        i = int(i)
        if i in (EOS, PAD):
            break
        out.append(i)
    return out


def encode_corpus(corpus: ParallelCorpus, vocab: Vocabulary, src_len: int, tgt_len: int):
    """Id tensors (src, tgt) for a whole corpus."""
    src = pad_sources([vocab.encode(s) for s in corpus.sources], src_len)
    tgt = pad_targets([vocab.encode(t) for t in corpus.targets], tgt_len)
    return src, tgt
