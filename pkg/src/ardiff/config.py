"""Flat ``key = value`` run configuration with environment and command-line overrides.

Precedence (lowest first): dataclass defaults, config file, ``ARDIFF_<KEY>``
environment variables, ``key=value`` overrides on the command line. Unknown
keys are rejected at every layer.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "ARDIFF_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    train_data: str = ""
    eval_data: str = ""
    tokenize: str = "whitespace"
    max_src_len: int = 0            # 0 -> longest source in the training data
    target_len: int = 0             # N; 0 -> longest target + 1 (room for eos)
    # model
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.2
    # diffusion
    total_steps: int = 100
    schedule_offset: float = 1e-4
    plan: str = "ar"                # ar | uniform
    anchor_n: float = 0.0           # 0 -> 2N
    anchor_t: float = 0.0           # 0 -> T
    rounding: str = "nearest"
    # optimisation
    lr: float = 3e-4
    lr_schedule: str = "cosine"
    warmup_steps: int = 200
    batch_size: int = 64
    max_steps: int = 2000
    grad_accum: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 1
    timing: bool = True
    # inference / evaluation
    checkpoint: str = ""
    baseline_checkpoint: str = ""
    steps: int = 20
    candidates: int = 1
    step_counts: str = "20,3,2"
    example: int = 0

    def train_config(self, target_len: int) -> TrainConfig:
        return _checked(TrainConfig, lr=self.lr, lr_schedule=self.lr_schedule,
                        warmup_steps=self.warmup_steps, batch_size=self.batch_size,
                        max_steps=self.max_steps, grad_accum=self.grad_accum, seed=self.seed,
                        anchor_n=self.anchor_n, anchor_t=self.anchor_t, total_steps=self.total_steps,
                        target_len=target_len, grad_clip=self.grad_clip, log_every=self.log_every,
                        timing=self.timing)

    def model_config(self, vocab_size: int, max_src_len: int, target_len: int) -> ModelConfig:
        return _checked(ModelConfig, vocab_size=vocab_size, embed_dim=self.embed_dim, layers=self.layers,
                        heads=self.heads, ffn_dim=self.ffn_dim, max_src_len=max_src_len,
                        max_tgt_len=target_len, dropout=self.dropout)

    def step_count_list(self):
        try:
            return [int(x) for x in self.step_counts.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"step_counts must be comma-separated integers: {self.step_counts!r}") from None

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _checked(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELDS[key].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines: Iterable[str], source: str) -> Dict[str, object]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                env: Optional[Mapping[str, str]] = None) -> RunConfig:
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    env = os.environ if env is None else env
    for name, raw in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key not in _FIELDS:
                raise ConfigError(f"unknown key in environment variable {name}")
            values[key] = _coerce(key, raw)
    values.update(parse_pairs(overrides, "<command line>"))
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
