"""Denoising diffusion with Gaussian, two-component mixture and Gamma noise.

Desk-scale numpy implementation: noise schedules, forward closed forms,
DDPM/DDIM samplers, a small MLP denoiser with hand-written backprop, training,
statistical checks and a command-line front end.
"""

from .forward import closed_form_batch, closed_form_sample, iterate_chain, residual_histogram
from .model import AdamState, Denoiser, adam_step, load, save
from .noise import (Gamma, Gaussian, Mixture, PhiSchedule, accumulated_noise, family_from_dict,
                    gamma_params, mixture_params, normalized_eps_target, step_noise)
from .reverse import SamplerConfig, ddim_step, ddpm_step, sample
from .schedule import (NoiseSchedule, explicit_schedule, fibonacci_schedule, linear_schedule,
                       snr_stats)
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Denoiser", "Gamma", "Gaussian", "Mixture", "NoiseSchedule", "PhiSchedule",
    "SamplerConfig", "TrainConfig", "accumulated_noise", "adam_step", "closed_form_batch",
    "closed_form_sample", "ddim_step", "ddpm_step", "explicit_schedule", "family_from_dict",
    "fibonacci_schedule", "gamma_params", "iterate_chain", "linear_schedule", "load",
    "mixture_params", "normalized_eps_target", "residual_histogram", "sample", "save",
    "snr_stats", "step_noise", "train_loop",
]
