"""Autoregressive-style diffusion for short sequence-to-sequence tasks."""
from .schedule import NoiseSchedule, TimestepPlan, ar_plan, build_sqrt_schedule, uniform_plan
from .model import Denoiser, ModelConfig

__version__ = "0.1.0"

__all__ = ["NoiseSchedule", "TimestepPlan", "ar_plan", "build_sqrt_schedule", "uniform_plan",
           "Denoiser", "ModelConfig", "__version__"]
