"""Multi-component learning: optimize only the per-noun slot embeddings so
each token's cross-attention settles on its own visual component. Backbone,
text encoder and base embeddings stay frozen throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .difftrain import PretrainedArtifacts, TrainingDivergedError, freeze_backbone, _to_batch
from .maskgen import aggregate_attention
from .prompts import make_template_prompt, num_templates, parse_caption
from .schedule import add_noise
from .textenc import encode_batch, tokenize
from .unet import predict_noise

log = logging.getLogger(__name__)


@dataclass
class MCLConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 50
    patience: int = 8  # evals without alignment improvement before early stop
    log_every: int = 100


def alignment_score(report: dict) -> float:
    """Scalar checkpoint-selection score: mean own-component IoU plus the
    worst own-vs-other margin (disentanglement must hold for every token)."""
    own = [r["own_iou"] for r in report.values()]
    margins = [
        r["own_iou"] - max(r["cross_iou"].values())
        for r in report.values()
        if r["cross_iou"]
    ]
    return float(np.mean(own)) + (min(margins) if margins else 0.0)


def train_mcl(
    images: list[np.ndarray],
    captions: list[str],
    art: PretrainedArtifacts,
    nouns: list[str],
    init_words: list[str] | None = None,
    config: MCLConfig | None = None,
    eval_set: list[tuple[np.ndarray, str, dict]] | None = None,
) -> list[float]:
    """Optimize the slot table on (image, per-step re-templated caption) pairs.

    `eval_set` entries are (image, caption, {noun: oracle bool mask}); when
    given, alignment IoU is tracked and training stops early on a plateau.
    Returns the loss curve.
    """
    if len(images) < 1:
        raise ValueError("need at least one normal image")
    cfg = config or MCLConfig()
    # Inject learnable rows, by default re-initialized from each noun's own
    # pretrained base row (the desk-scale analogue of a coarse init word).
    art.table.init_learnable(nouns, init_words or list(nouns), art.vocab)
    freeze_backbone(art)
    art.table.slot_table.requires_grad_(True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    data = _to_batch(images)
    items = [parse_caption(c)[1] for c in captions]
    slot_nouns = art.table.slot_nouns

    opt = torch.optim.Adam([art.table.slot_table], lr=cfg.lr)
    losses: list[float] = []
    best_iou = -1.0
    best_slots = None
    stale = 0
    if eval_set:
        # the init (each noun's own base row) competes as a candidate too
        best_iou = alignment_score(attention_alignment_report(art, eval_set))
        best_slots = art.table.slot_table.detach().clone()
        log.info("mcl init alignment score %.3f", best_iou)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        x0 = data[idx]
        t = torch.from_numpy(rng.integers(1, art.schedule.T_train + 1, size=cfg.batch_size))
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, t, eps, art.schedule)
        token_seqs = []
        for i in idx:
            tid = int(rng.integers(num_templates()))
            caption = make_template_prompt(
                [n for _, n in items[i]], tid, adjectives=[a for a, _ in items[i]]
            )
            token_seqs.append(tokenize(caption, art.vocab, slot_nouns))
        cond, mask = encode_batch(token_seqs, art.table, art.text_encoder)
        pred, _ = art.model(x_t, t, cond, mask)
        loss = F.mse_loss(pred, eps)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"MCL loss non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step % cfg.log_every == 0:
            log.info("mcl step %d loss %.4f", step, losses[-1])
        if eval_set and (step + 1) % cfg.eval_every == 0:
            report = attention_alignment_report(art, eval_set)
            score = alignment_score(report)
            log.info("mcl step %d alignment score %.3f", step, score)
            if score > best_iou + 1e-3:
                best_iou = score
                best_slots = art.table.slot_table.detach().clone()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("mcl early stop at step %d (alignment plateau)", step)
                    break
    if best_slots is not None:
        with torch.no_grad():
            art.table.slot_table.copy_(best_slots)
        log.info("mcl kept best slot table (alignment score %.3f)", best_iou)
    return losses


def token_attention_maps(
    art: PretrainedArtifacts,
    image: np.ndarray,
    caption: str,
    t: int = 0,
):
    """Record one forward pass at timestep t and aggregate per-noun maps."""
    from .textenc import encode

    slot_nouns = art.table.slot_nouns
    tokens = tokenize(caption, art.vocab, slot_nouns)
    with torch.no_grad():
        cond = encode(tokens, art.table, art.text_encoder)[None]
        x = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1)[None]
        _, stack = predict_noise(art.model, x, t, cond, record=True)
    return aggregate_attention(stack, tokens, slot_nouns)


def attention_iou(
    attn_map: np.ndarray, oracle_mask: np.ndarray, quantile: float | None = None
) -> float:
    """IoU of the strongest attention region against an oracle mask.

    By default the map is binarized area-matched (its top-k pixels, k = oracle
    mask area), so a perfectly aligned map scores near 1 regardless of how
    small the component is. Pass `quantile` for a fixed-threshold cut instead.
    """
    H = oracle_mask.shape[0]
    up = F.interpolate(
        torch.from_numpy(attn_map)[None, None], size=(H, H), mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    if quantile is None:
        k = int(oracle_mask.sum())
        if k == 0:
            return 1.0
        th = np.partition(up.ravel(), -k)[-k]
        pred = up >= th
    else:
        th = np.quantile(up, quantile)
        pred = up > th
    inter = np.logical_and(pred, oracle_mask).sum()
    union = np.logical_or(pred, oracle_mask).sum()
    return float(inter) / float(union) if union else 1.0


def attention_alignment_report(
    art: PretrainedArtifacts,
    eval_set: list[tuple[np.ndarray, str, dict]],
    quantile: float | None = None,
) -> dict[str, dict]:
    """Per-token IoU against every component's oracle mask.

    Returns {noun: {"own_iou": float, "cross_iou": {other: float},
    "mean_map": 16x16 array}} averaged over the eval images.
    """
    slot_nouns = art.table.slot_nouns
    per_noun_own: dict[str, list[float]] = {n: [] for n in slot_nouns}
    per_noun_cross: dict[str, dict[str, list[float]]] = {
        n: {m: [] for m in slot_nouns if m != n} for n in slot_nouns
    }
    map_sums: dict[str, np.ndarray] = {}
    for image, caption, oracle_masks in eval_set:
        tam = token_attention_maps(art, image, caption)
        for noun in slot_nouns:
            m = tam.maps[noun]
            map_sums[noun] = map_sums.get(noun, 0) + m
            if oracle_masks.get(noun) is not None and oracle_masks[noun].any():
                per_noun_own[noun].append(attention_iou(m, oracle_masks[noun], quantile))
            for other in per_noun_cross[noun]:
                om = oracle_masks.get(other)
                if om is not None and om.any():
                    per_noun_cross[noun][other].append(attention_iou(m, om, quantile))
    report = {}
    for noun in slot_nouns:
        report[noun] = {
            "own_iou": float(np.mean(per_noun_own[noun])) if per_noun_own[noun] else 0.0,
            "cross_iou": {
                o: (float(np.mean(v)) if v else 0.0)
                for o, v in per_noun_cross[noun].items()
            },
            "mean_map": map_sums.get(noun, np.zeros((16, 16))) / max(len(eval_set), 1),
        }
    return report
