"""Deterministic DDIM sampling, inversion, and reconstruction.

All three walk the same sub-schedule of the training timesteps. The update
uses the predicted clean image f(x_t, t) = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t):

    forward  (invert):      x_{t+1} = sqrt(ab_{t+1}) f(x_t, t) + sqrt(1-ab_{t+1}) eps(x_t, t)
    backward (reconstruct): x_{t-1} = sqrt(ab_{t-1}) f(x_t, t) + sqrt(1-ab_{t-1}) eps(x_t, t)

`eps_fn(x, t, record) -> (eps, layer_maps | None)` abstracts the network so
closed-form score models can drive the same code in tests.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch

from .schedule import NoiseSchedule
from .unet import AttentionStack, DiffusionModel

EpsFn = Callable[..., tuple[torch.Tensor, Optional[dict]]]


def make_eps_fn(
    model: DiffusionModel,
    cond: torch.Tensor,
    cond_mask: torch.Tensor | None = None,
) -> EpsFn:
    def eps_fn(x: torch.Tensor, t: int, record: bool = False):
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)
        return model(x, tt, cond, cond_mask, record=record)

    return eps_fn


def ddim_timesteps(T_train: int, T: int) -> np.ndarray:
    """T+1 strictly increasing schedule nodes from 0 to T_train."""
    if not 1 <= T <= T_train:
        raise ValueError(f"need 1 <= T <= {T_train}")
    return np.round(np.linspace(0, T_train, T + 1)).astype(int)


def predicted_x0(x: torch.Tensor, eps: torch.Tensor, ab_t: float) -> torch.Tensor:
    return (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)


def _step(x, eps, ab_cur: float, ab_dst: float) -> torch.Tensor:
    f = predicted_x0(x, eps, ab_cur)
    return np.sqrt(ab_dst) * f + np.sqrt(1.0 - ab_dst) * eps


@torch.no_grad()
def ddim_sample(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    shape: tuple,
    T: int = 50,
    seed: int = 0,
    record: bool = False,
    record_all: bool = False,
    x_init: torch.Tensor | None = None,
) -> tuple[torch.Tensor, AttentionStack | None]:
    """Generate images from seeded Gaussian noise; deterministic in (seed, cond)."""
    nodes = ddim_timesteps(schedule.T_train, T)
    if x_init is not None:
        x = x_init.clone()
    else:
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn(shape, generator=gen)
    stack = AttentionStack() if record else None
    for i in range(T, 0, -1):
        t_cur, t_dst = int(nodes[i]), int(nodes[i - 1])
        eps, maps = eps_fn(x, t_cur, record=record and record_all)
        if maps is not None:
            stack.record(t_cur, maps, dict(DiffusionModel.ATTN_GRIDS))
        x = _step(x, eps, schedule.alpha_bar[t_cur], schedule.alpha_bar[t_dst])
    img = x.clamp(0.0, 1.0)
    if record:
        _, maps = eps_fn(img, 0, record=True)
        stack.record(0, maps, dict(DiffusionModel.ATTN_GRIDS))
    return img, stack


@torch.no_grad()
def ddim_invert(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    image: torch.Tensor,
    T: int = 50,
    start_index: int = 0,
) -> list[torch.Tensor]:
    """Forward DDIM encoding; returns the latent trajectory (length T+1 - start_index).

    `start_index` > 0 starts the walk at an interior schedule node (used by
    closed-form round-trip checks, where the t=0 boundary is singular).
    """
    nodes = ddim_timesteps(schedule.T_train, T)
    traj = [image.clone()]
    x = image
    for i in range(start_index, T):
        t_cur, t_dst = int(nodes[i]), int(nodes[i + 1])
        eps, _ = eps_fn(x, t_cur, record=False)
        x = _step(x, eps, schedule.alpha_bar[t_cur], schedule.alpha_bar[t_dst])
        traj.append(x.clone())
    return traj


@torch.no_grad()
def ddim_reconstruct(
    eps_fn: EpsFn,
    schedule: NoiseSchedule,
    latent: torch.Tensor,
    T: int = 50,
    record: bool = False,
    record_all: bool = False,
    stop_index: int = 0,
    clamp: bool = True,
) -> tuple[torch.Tensor, AttentionStack | None]:
    """Reverse DDIM from an inverted latent back to the image."""
    nodes = ddim_timesteps(schedule.T_train, T)
    x = latent
    stack = AttentionStack() if record else None
    for i in range(T, stop_index, -1):
        t_cur, t_dst = int(nodes[i]), int(nodes[i - 1])
        eps, maps = eps_fn(x, t_cur, record=record and record_all)
        if maps is not None:
            stack.record(t_cur, maps, dict(DiffusionModel.ATTN_GRIDS))
        x = _step(x, eps, schedule.alpha_bar[t_cur], schedule.alpha_bar[t_dst])
    out = x.clamp(0.0, 1.0) if clamp else x
    if record:
        _, maps = eps_fn(out, 0, record=True)
        stack.record(0, maps, dict(DiffusionModel.ATTN_GRIDS))
    return out, stack
