"""Denoising diffusion pretraining on normal scenes.

Trains the U-Net jointly with the text encoder and the base embedding table
on (image, caption) pairs; the text side is frozen afterwards and only slot
rows remain trainable (see mcl.py).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, add_noise
from .textenc import EmbeddingTable, TextEncoder, TokenSeq, Vocabulary, encode_batch, tokenize
from .unet import DiffusionModel, UNetConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 100


@dataclass
class PretrainedArtifacts:
    model: DiffusionModel
    table: EmbeddingTable
    text_encoder: TextEncoder
    schedule: NoiseSchedule
    vocab: Vocabulary
    losses: list[float]


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.stack(
        [torch.as_tensor(im, dtype=torch.float32).permute(2, 0, 1) for im in images]
    )


def train_ldm(
    images: list[np.ndarray],
    captions: list[str],
    config: PretrainConfig | None = None,
    schedule: NoiseSchedule | None = None,
    unet_config: UNetConfig | None = None,
    vocab: Vocabulary | None = None,
) -> PretrainedArtifacts:
    """Minimize the noise-prediction loss over (image, caption) pairs.

    Deterministic for a fixed seed in single-thread mode.
    """
    if len(images) < 1:
        raise ValueError("need at least one training image")
    cfg = config or PretrainConfig()
    schedule = schedule or NoiseSchedule()
    vocab = vocab or Vocabulary()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    model = DiffusionModel(unet_config)
    table = EmbeddingTable(len(vocab))
    text_encoder = TextEncoder()
    token_seqs = [tokenize(c, vocab) for c in captions]
    data = _to_batch(images)

    params = (
        list(model.parameters()) + list(text_encoder.parameters()) + [table.base]
    )
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)

    losses: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        x0 = data[idx]
        t = torch.from_numpy(rng.integers(1, schedule.T_train + 1, size=cfg.batch_size))
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, t, eps, schedule)
        cond, mask = encode_batch([token_seqs[i] for i in idx], table, text_encoder)
        pred, _ = model(x_t, t, cond, mask)
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}; last losses {losses[-5:]}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step % cfg.log_every == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])

    model.eval()
    text_encoder.eval()
    return PretrainedArtifacts(model, table, text_encoder, schedule, vocab, losses)


def freeze_backbone(art: PretrainedArtifacts):
    """Freeze everything the MCL stage must not touch."""
    for p in art.model.parameters():
        p.requires_grad_(False)
    for p in art.text_encoder.parameters():
        p.requires_grad_(False)
    art.table.base.requires_grad_(False)


@torch.no_grad()
def heldout_loss(
    art: PretrainedArtifacts,
    images: list[np.ndarray],
    captions: list[str],
    seed: int = 1234,
    n_draws: int = 4,
) -> float:
    """Average noise-prediction loss over a fixed probe of (t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    data = _to_batch(images)
    token_seqs = [tokenize(c, art.vocab) for c in captions]
    total = 0.0
    for _ in range(n_draws):
        t = torch.from_numpy(rng.integers(1, art.schedule.T_train + 1, size=len(images)))
        eps = torch.randn(data.shape, generator=gen)
        x_t = add_noise(data, t, eps, art.schedule)
        cond, mask = encode_batch(token_seqs, art.table, art.text_encoder)
        pred, _ = art.model(x_t, t, cond, mask)
        total += float(F.mse_loss(pred, eps))
    return total / n_draws
