"""Deterministic DDIM stepping (eta = 0) over a 1000-step training schedule.

The same closed-form update serves both directions: given the noise
prediction at the *from* point, jump to any other noise level. Walking the
schedule upward inverts an image into terminal noise; walking it downward
denoises. The only inversion error is the first-order mismatch of where the
noise prediction is evaluated.
"""
from __future__ import annotations

import numpy as np
import torch

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


def make_schedule(num_steps: int, train_steps: int = TRAIN_STEPS) -> list[int]:
    """Ascending, strictly monotonic timesteps covering [0, train_steps-1].

    num_steps == train_steps yields every step; num_steps == 1 yields just
    the terminal step.
    """
    if not 1 <= num_steps <= train_steps:
        raise ValueError(f"num_steps must be in [1, {train_steps}], got {num_steps}")
    if num_steps == 1:
        return [train_steps - 1]
    ts = np.round(np.linspace(0, train_steps - 1, num_steps)).astype(int)
    return [int(t) for t in ts]


class DdimScheduler:
    def __init__(self, train_steps: int = TRAIN_STEPS, beta_start: float = BETA_START, beta_end: float = BETA_END):
        self.train_steps = train_steps
        # Scaled-linear spacing (linear in sqrt(beta)), the latent-diffusion
        # convention; keeps terminal amplification 1/sqrt(alpha_bar_T) mild.
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps, dtype=np.float64) ** 2
        self.alphas_cumprod = np.cumprod(1.0 - betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction; t == -1 denotes the clean image."""
        if t == -1:
            return 1.0
        return float(self.alphas_cumprod[t])

    def step(self, x: torch.Tensor, eps: torch.Tensor, t_from: int, t_to: int) -> torch.Tensor:
        """Move a latent between noise levels given eps predicted at t_from."""
        a_from = self.alpha_bar(t_from)
        a_to = self.alpha_bar(t_to)
        sqrt_af, sqrt_at = a_from ** 0.5, a_to ** 0.5
        x0 = (x - (1.0 - a_from) ** 0.5 * eps) / sqrt_af
        return sqrt_at * x0 + (1.0 - a_to) ** 0.5 * eps

    @staticmethod
    def model_t(t: int) -> int:
        """Timestep fed to the noise model; the clean point queries t=0."""
        return max(t, 0)
