"""DDPM noise schedule (pixel space; "latent" is the image tensor itself)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with the alpha_bar[0] = 1 boundary convention.

    alpha_bar has length T_train + 1; alpha_bar[t] is the cumulative product
    of (1 - beta) over the first t steps, strictly decreasing in t.
    """

    T_train: int = 400
    beta_start: float = 1e-4
    # 0.025 rather than the customary 0.02: at T_train = 400, 0.02 leaves
    # alpha_bar[T] ~ 0.018, not noisy enough for sampling from pure noise.
    beta_end: float = 0.025

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T_train, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.betas = betas
        self.alpha_bar = alpha_bar
        assert alpha_bar[-1] < 0.01, "terminal alpha_bar must be < 0.01"
        assert np.all(np.diff(alpha_bar) < 0)

    def ab(self, t) -> torch.Tensor:
        """alpha_bar at (possibly batched) integer timestep t."""
        t = torch.as_tensor(t, dtype=torch.long)
        ab = torch.from_numpy(self.alpha_bar)
        return ab[t]

    def snr(self, t) -> torch.Tensor:
        ab = self.ab(t)
        return ab / (1.0 - ab)

    def state_dict(self) -> dict:
        return {
            "T_train": self.T_train,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @staticmethod
    def from_state_dict(d: dict) -> "NoiseSchedule":
        return NoiseSchedule(int(d["T_train"]), float(d["beta_start"]), float(d["beta_end"]))


def add_noise(
    x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, with per-sample t allowed."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 0) or torch.any(t > schedule.T_train):
        raise ValueError(f"timestep out of range [0, {schedule.T_train}]")
    if eps.shape != x0.shape:
        raise ValueError("noise must match image shape")
    ab = schedule.ab(t).to(x0.dtype)
    while ab.ndim < x0.ndim:
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
