"""Cross-scale difference aggregation detector: fuses encoder features with
differential features against the nearest normal reference, gates them with
a coarse-to-fine mask cascade, and decodes a per-pixel anomaly score map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .refbank import FeatureEncoder, MemoryBank, diff_features, nearest_reference

log = logging.getLogger(__name__)


def _normalize01(m: torch.Tensor) -> torch.Tensor:
    """Per-sample max normalization; all-zero maps stay zero."""
    flat = m.reshape(m.shape[0], -1)
    peak = flat.max(dim=1).values.clamp(min=1e-12)
    return m / peak[:, None, None]


def _up2(m: torch.Tensor) -> torch.Tensor:
    return F.interpolate(m[:, None], scale_factor=2, mode="bilinear", align_corners=False)[:, 0]


def cascade_masks(
    m1: torch.Tensor, m2: torch.Tensor, m3: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Coarse-to-fine mask cascade: the coarsest map passes through, finer
    maps are gated by the upsampled coarser cascade. Inputs (B, h, w) with
    h1 = 2 h2 = 4 h3; each map is max-normalized to [0,1] first."""
    for m in (m1, m2, m3):
        if m.ndim != 3:
            raise ValueError("masks must be batched (B, h, w)")
    if not (m1.shape[-1] == 2 * m2.shape[-1] == 4 * m3.shape[-1]):
        raise ValueError(
            f"shape chain violated: {m1.shape[-1]}, {m2.shape[-1]}, {m3.shape[-1]}"
        )
    n1, n2, n3 = _normalize01(m1), _normalize01(m2), _normalize01(m3)
    c3 = n3
    c2 = n2 * _up2(c3)
    c1 = n1 * _up2(c2)
    return c1, c2, c3


class _SeparableDown(nn.Module):
    """Depth-wise separable stride-2 convolution (the downscaling path)."""

    def __init__(self, ch: int):
        super().__init__()
        self.depth = nn.Conv2d(ch, ch, 3, stride=2, padding=1, groups=ch)
        self.point = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return self.point(self.depth(x))


class _BilinearUp(nn.Module):
    """Bilinear interpolation followed by a 1x1 convolution (the upscaling path)."""

    def __init__(self, ch: int):
        super().__init__()
        self.point = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return self.point(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


def _proj(cin: int, w: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, w, 1), nn.GroupNorm(8, w), nn.SiLU())


def _refine(w: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(w, w, 3, padding=1), nn.GroupNorm(8, w), nn.SiLU())


class CSDADetector(nn.Module):
    """U-Net-style fusion over three feature scales with mask gating.

    `use_diff` controls whether differential channels are part of the input;
    `use_csda` controls the cross-scale exchange and the mask gating (when
    off, the detector reduces to a plain per-scale decoder).
    """

    def __init__(
        self,
        feature_channels: tuple[int, int, int] = FeatureEncoder.CHANNELS,
        width: int = 32,
        use_diff: bool = True,
        use_csda: bool = True,
        out_size: int = 64,
    ):
        super().__init__()
        self.use_diff = use_diff
        self.use_csda = use_csda
        self.out_size = out_size
        mult = 2 if use_diff else 1
        c1, c2, c3 = (mult * c for c in feature_channels)
        self.proj1, self.proj2, self.proj3 = _proj(c1, width), _proj(c2, width), _proj(c3, width)
        if use_csda:
            self.down12 = _SeparableDown(width)
            self.down23 = _SeparableDown(width)
            self.up21 = _BilinearUp(width)
            self.up32 = _BilinearUp(width)
            self.ref1, self.ref2, self.ref3 = _refine(width), _refine(width), _refine(width)
        self.dec_merge = nn.Sequential(
            nn.Conv2d(3 * width, width, 3, padding=1), nn.GroupNorm(8, width), nn.SiLU()
        )
        self.dec_fine = nn.Sequential(
            nn.Conv2d(width, 16, 3, padding=1), nn.GroupNorm(8, 16), nn.SiLU()
        )
        self.head = nn.Conv2d(16, 1, 1)

    def forward(
        self,
        fused: list[torch.Tensor],
        masks: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """fused: [C1 (B,c,32,32), C2 (B,c,16,16), C3 (B,c,8,8)];
        masks: cascaded (m'_1, m'_2, m'_3), required when use_csda."""
        x1 = self.proj1(fused[0])
        x2 = self.proj2(fused[1])
        x3 = self.proj3(fused[2])
        if self.use_csda:
            if masks is None:
                raise ValueError("CSDA forward needs cascaded masks")
            y1 = self.ref1(x1 + self.up21(x2))
            y2 = self.ref2(x2 + self.down12(x1) + self.up32(x3))
            y3 = self.ref3(x3 + self.down23(x2))
            x1 = y1 * masks[0][:, None]
            x2 = y2 * masks[1][:, None]
            x3 = y3 * masks[2][:, None]
        h = torch.cat(
            [
                x1,
                F.interpolate(x2, scale_factor=2, mode="bilinear", align_corners=False),
                F.interpolate(x3, scale_factor=4, mode="bilinear", align_corners=False),
            ],
            dim=1,
        )
        h = self.dec_merge(h)
        h = F.interpolate(h, size=(self.out_size, self.out_size), mode="bilinear",
                          align_corners=False)
        h = self.dec_fine(h)
        return torch.sigmoid(self.head(h))[:, 0]


# ---------------------------------------------------------------------------
# Losses


def focal_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Pixel-mean focal loss on probabilities; exactly zero at exact match.

    alpha=None disables class balancing (gamma=0 then gives plain BCE)."""
    p = pred
    log_p = torch.log(p.clamp(min=1e-12))
    log_q = torch.log((1 - p).clamp(min=1e-12))
    a_pos = alpha if alpha is not None else 1.0
    a_neg = (1 - alpha) if alpha is not None else 1.0
    pos = -a_pos * target * (1 - p) ** gamma * log_p
    neg = -a_neg * (1 - target) * p**gamma * log_q
    return (pos + neg).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    inter = (pred * target).sum()
    return 1.0 - (2 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def total_loss(
    pred: torch.Tensor, target: torch.Tensor, omega: float = 5.0
) -> torch.Tensor:
    """Smooth-L1 + omega * Focal + Dice; zero iff pred equals the binary target."""
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target mask must be binary")
    sl1 = F.smooth_l1_loss(pred, target, beta=1.0)
    return sl1 + omega * focal_loss(pred, target) + dice_loss(pred, target)


def image_score(score_map: np.ndarray | torch.Tensor) -> float:
    """Mean of the top 1% of pixel scores."""
    v = np.asarray(score_map, dtype=np.float64).ravel()
    k = max(1, math.ceil(0.01 * v.size))
    return float(np.sort(v)[-k:].mean())


# ---------------------------------------------------------------------------
# Training and scoring


@dataclass
class DetectorConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    omega: float = 5.0
    seed: int = 0
    augment: bool = True
    width: int = 32
    log_every: int = 100


def _augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Random 90-degree rotation and random crop-resize of (image, mask)."""
    k = int(rng.integers(4))
    img = np.rot90(image, k, axes=(0, 1)).copy()
    msk = np.rot90(mask, k, axes=(0, 1)).copy()
    H = img.shape[0]
    size = int(rng.integers(int(0.85 * H), H + 1))
    y0 = int(rng.integers(0, H - size + 1))
    x0 = int(rng.integers(0, H - size + 1))
    img_t = torch.from_numpy(img[y0 : y0 + size, x0 : x0 + size].copy()).permute(2, 0, 1)[None]
    msk_t = torch.from_numpy(msk[y0 : y0 + size, x0 : x0 + size].astype(np.float32))[None, None]
    img_r = F.interpolate(img_t, size=(H, H), mode="bilinear", align_corners=False)
    msk_r = F.interpolate(msk_t, size=(H, H), mode="nearest")
    return (
        img_r[0].permute(1, 2, 0).numpy(),
        msk_r[0, 0].numpy() > 0.5,
    )


class _FeatureCache:
    """Precomputed fused inputs, cascaded masks and targets for training."""

    def __init__(self, fused, masks, targets):
        self.fused = fused  # list of 3 tensors (N, c, h, w)
        self.masks = masks  # tuple of 3 tensors (N, h, w)
        self.targets = targets  # (N, H, W) float

    def __len__(self):
        return self.targets.shape[0]

    def batch(self, idx):
        fused = [f[idx] for f in self.fused]
        masks = tuple(m[idx] for m in self.masks)
        return fused, masks, self.targets[idx]


@torch.no_grad()
def build_feature_cache(
    items: list[tuple[np.ndarray, np.ndarray]],
    encoder: FeatureEncoder,
    bank: MemoryBank,
    use_diff: bool = True,
    batch_size: int = 32,
) -> _FeatureCache:
    """Encode (image, target-mask) pairs into detector inputs."""
    fused1, fused2, fused3, m1s, m2s, m3s, targets = [], [], [], [], [], [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        pyramids = encoder.encode_batch([im for im, _ in chunk])
        for (im, target), feat in zip(chunk, pyramids):
            _, ref = nearest_reference(feat, bank)
            dp = diff_features(feat, ref)
            cs = [
                torch.cat([f, d], dim=0) if use_diff else f
                for f, d in zip(feat.scales(), dp.diffs())
            ]
            fused1.append(cs[0])
            fused2.append(cs[1])
            fused3.append(cs[2])
            m1s.append(dp.m1)
            m2s.append(dp.m2)
            m3s.append(dp.m3)
            targets.append(torch.from_numpy(target.astype(np.float32)))
    masks = cascade_masks(torch.stack(m1s), torch.stack(m2s), torch.stack(m3s))
    return _FeatureCache(
        [torch.stack(fused1), torch.stack(fused2), torch.stack(fused3)],
        masks,
        torch.stack(targets),
    )


def train_detector(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    normals: list[np.ndarray],
    encoder: FeatureEncoder,
    bank: MemoryBank,
    config: DetectorConfig | None = None,
    use_diff: bool = True,
    use_csda: bool = True,
) -> tuple[CSDADetector, list[float]]:
    """Train on generated (image, mask) pairs mixed 1:1 with zero-mask normals."""
    if not pairs:
        raise ValueError("need at least one anomaly pair")
    cfg = config or DetectorConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    H = pairs[0][0].shape[0]
    items: list[tuple[np.ndarray, np.ndarray]] = []
    items += [(im, m.astype(bool)) for im, m in pairs]
    items += [(im, np.zeros((H, H), dtype=bool)) for im in normals]
    if cfg.augment:
        items += [_augment(im, m, rng) for im, m in items]
    cache = build_feature_cache(items, encoder, bank, use_diff=use_diff)

    det = CSDADetector(width=cfg.width, use_diff=use_diff, use_csda=use_csda, out_size=H)
    opt = torch.optim.Adam(det.parameters(), lr=cfg.lr)
    losses: list[float] = []
    for step in range(cfg.steps):
        idx = torch.from_numpy(rng.integers(0, len(cache), size=cfg.batch_size))
        fused, masks, target = cache.batch(idx)
        pred = det(fused, masks if use_csda else None)
        loss = total_loss(pred, target, cfg.omega)
        if not torch.isfinite(loss):
            raise RuntimeError(f"detector loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step % cfg.log_every == 0:
            log.info("detector step %d loss %.4f", step, losses[-1])
    det.eval()
    return det, losses


@torch.no_grad()
def score_images(
    det: CSDADetector,
    images: list[np.ndarray],
    encoder: FeatureEncoder,
    bank: MemoryBank,
    batch_size: int = 32,
) -> np.ndarray:
    """Per-pixel score maps (N, H, W) for a list of images."""
    H = images[0].shape[0]
    dummy = [(im, np.zeros((H, H), dtype=bool)) for im in images]
    cache = build_feature_cache(dummy, encoder, bank, use_diff=det.use_diff)
    out = []
    for start in range(0, len(cache), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(cache)))
        fused, masks, _ = cache.batch(idx)
        pred = det(fused, masks if det.use_csda else None)
        out.append(pred.numpy())
    return np.concatenate(out, axis=0)
