"""Noise tables and the position-dependent token-level timestep function.

All objects here are immutable and every function is pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

ALPHA_BAR_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables indexed by token-level timestep 0..T.

    ``alpha_bar[t]`` is the cumulative signal coefficient and
    ``alpha[t] = alpha_bar[t] / alpha_bar[t - 1]`` for t >= 1. ``alpha[0]`` is
    set equal to ``alpha_bar[0]``. ``embed_alpha`` is the variance coefficient of
    the embedding step, q(z_0 | y) = N(Emb(y), (1 - embed_alpha) I).
    """

    total_steps: int
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    embed_alpha: float = 1.0

    def __post_init__(self):
        for arr in (self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    @property
    def sqrt_alpha_bar(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sqrt_one_minus_alpha_bar(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)


def build_sqrt_schedule(total_steps: int, offset: float = 1e-4) -> NoiseSchedule:
    """alpha_bar[t] = 1 - sqrt(t / T + offset), floored at ``ALPHA_BAR_FLOOR``."""
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps!r}")
    if not 0.0 < offset < 1.0:
        raise ValueError(f"offset must lie in (0, 1), got {offset!r}")
    total_steps = int(total_steps)
    t = np.arange(total_steps + 1, dtype=np.float64)
    alpha_bar = 1.0 - np.sqrt(t / total_steps + offset)
    alpha_bar = np.clip(alpha_bar, ALPHA_BAR_FLOOR, 1.0)
    if np.any(np.diff(alpha_bar) >= 0):
        # the floor flattened more than the last entry
        raise ValueError(
            f"offset={offset} with total_steps={total_steps} gives a non-decreasing alpha_bar table"
        )
    alpha = np.empty_like(alpha_bar)
    alpha[0] = alpha_bar[0]
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(total_steps, alpha, alpha_bar, float(alpha[1]))


@dataclass(frozen=True)
class TimestepPlan:
    """Maps (position, sentence-level timestep) to a token-level timestep.

    ``kind="ar"`` is the point-slope plan through the anchor (n_e, t_e) whose
    sentence-level domain is [0, N + T]. ``kind="uniform"`` ignores position
    (every token shares the sentence timestep) and has domain [0, T].
    """

    target_len: int
    total_steps: int
    anchor: Tuple[float, float]
    rounding: str = "nearest"
    kind: str = "ar"

    def __post_init__(self):
        if self.target_len < 1 or self.total_steps < 1:
            raise ValueError("target_len and total_steps must be positive")
        if self.rounding not in ("nearest", "floor"):
            raise ValueError(f"unknown rounding rule {self.rounding!r}")
        if self.kind not in ("ar", "uniform"):
            raise ValueError(f"unknown plan kind {self.kind!r}")
        n_e, _ = self.anchor
        if n_e <= self.target_len:
            raise ValueError(
                f"anchor n_e={n_e} must exceed target_len={self.target_len}"
            )

    @property
    def max_t(self) -> int:
        """Upper end of the sentence-level timestep domain."""
        if self.kind == "uniform":
            return self.total_steps
        return self.target_len + self.total_steps

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.max_t):
            raise ValueError(f"sentence timestep outside [0, {self.max_t}]: {t}")
        return t

    def raw_timesteps(self, t) -> np.ndarray:
        """Unrounded, clipped f(n, t) for n = 1..N; shape ``t.shape + (N,)``."""
        t = self._check_t(t)
        n = np.arange(1, self.target_len + 1, dtype=np.float64)
        T = float(self.total_steps)
        if self.kind == "uniform":
            return np.broadcast_to(np.clip(t, 0.0, T)[..., None], t.shape + (self.target_len,)).copy()
        return np.clip(_point_slope(self, n, t[..., None]), 0.0, T)

    def token_timesteps(self, t) -> np.ndarray:
        """Integer token-level timesteps for all positions at sentence timestep(s) ``t``."""
        return _round(self.raw_timesteps(t), self.rounding)


def _point_slope(plan: TimestepPlan, n, t):
    """Pre-clip point-slope line through the start point and the anchor."""
    N, T = float(plan.target_len), float(plan.total_steps)
    n_e, t_e = plan.anchor
    n_s = np.clip(N - t, 0.0, N)
    t_s = np.clip(t - N, 0.0, T)
    return (t_e - t_s) / (n_e - n_s) * (n - n_s) + t_s


def _round(x, rule: str):
    if rule == "floor":
        # 1e-9 absorbs float error on exact integers such as 399.99999999999994
        return np.floor(np.asarray(x) + 1e-9).astype(np.int64)
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def ar_plan(target_len: int, total_steps: int, anchor: Optional[Tuple[float, float]] = None,
            rounding: str = "nearest") -> TimestepPlan:
    """Position-dependent plan; the anchor defaults to (2N, T)."""
    if anchor is None:
        anchor = (2.0 * target_len, float(total_steps))
    return TimestepPlan(target_len, total_steps, (float(anchor[0]), float(anchor[1])), rounding, "ar")


def uniform_plan(target_len: int, total_steps: int, rounding: str = "nearest") -> TimestepPlan:
    """Baseline where every position shares f(n, t) = clip(t, 0, T)."""
    return TimestepPlan(target_len, total_steps, (2.0 * target_len, float(total_steps)), rounding, "uniform")


def start_point(plan: TimestepPlan, t: float) -> Tuple[float, float]:
    """Moving origin (n_s, t_s) of the timestep line at sentence timestep ``t``."""
    plan._check_t(t)
    N, T = plan.target_len, plan.total_steps
    return float(min(max(N - t, 0), N)), float(min(max(t - N, 0), T))


def _check_position(plan: TimestepPlan, n: int):
    if not 1 <= n <= plan.target_len:
        raise ValueError(f"position {n} outside [1, {plan.target_len}]")


def raw_token_timestep(plan: TimestepPlan, n: int, t: float) -> float:
    _check_position(plan, n)
    return float(plan.raw_timesteps(t)[n - 1])


def token_timestep(plan: TimestepPlan, n: int, t: float) -> int:
    """f(n, t) after the plan's rounding rule; always within [0, T]."""
    _check_position(plan, n)
    return int(plan.token_timesteps(t)[n - 1])


@dataclass(frozen=True)
class MovementSpeed:
    position: int
    from_t: float
    to_t: float
    speed: float


def movement_speed(plan: TimestepPlan, n: int, t_from: float, t_to: float) -> MovementSpeed:
    """Change of the (unrounded) token timestep of position ``n`` between two sentence timesteps."""
    speed = raw_token_timestep(plan, n, t_to) - raw_token_timestep(plan, n, t_from)
    return MovementSpeed(n, float(t_from), float(t_to), speed)


def schedule_rows(plan: TimestepPlan, schedule: NoiseSchedule):
    """Yield (t, n, f(n,t), alpha_bar[f(n,t)]) over the whole sentence-level domain."""
    for t in range(plan.max_t + 1):
        steps = plan.token_timesteps(t)
        for n in range(1, plan.target_len + 1):
            f = int(steps[n - 1])
            yield t, n, f, float(schedule.alpha_bar[f])


__all__ = [
    "NoiseSchedule", "TimestepPlan", "MovementSpeed", "build_sqrt_schedule", "ar_plan",
    "uniform_plan", "start_point", "token_timestep", "raw_token_timestep", "movement_speed",
    "schedule_rows", "ALPHA_BAR_FLOOR",
]
