"""Channel-wise windowed SSIM between feature maps (float64 throughout)."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

K1 = 0.01
K2 = 0.03
WINDOW = 7
SIGMA = 1.5


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_channelwise(
    a: torch.Tensor | np.ndarray,
    b: torch.Tensor | np.ndarray,
    window: int = WINDOW,
) -> float:
    """Mean over channels of single-channel windowed SSIM; result in [-1, 1].

    a, b: (c, h, w). Dynamic range is taken from the data (shared over both
    inputs, so the measure stays symmetric). Windows larger than the map are
    reduced to the map size.
    """
    a = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c, h, w = a.shape
    win = min(window, h, w)
    if win < window:
        log.info("SSIM window reduced from %d to %d for %dx%d maps", window, win, h, w)
    kernel = _gaussian_window(win, SIGMA)

    data_range = float(max(a.max(), b.max()) - min(a.min(), b.min()))
    L = max(data_range, 1e-8)
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2

    x = a[:, None]  # channels as batch
    y = b[:, None]
    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    mu_xx = F.conv2d(x * x, kernel)
    mu_yy = F.conv2d(y * y, kernel)
    mu_xy = F.conv2d(x * y, kernel)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())
