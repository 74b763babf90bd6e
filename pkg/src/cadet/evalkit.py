"""Evaluation utilities: ranking AUROC, per-region overlap curves, mask IoU,
and a composition-diversity proxy, plus deterministic metrics serialization.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .scenegen import CompositionRule, classify_components

log = logging.getLogger(__name__)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Tie-aware area under the ROC curve (rank statistic form).

    labels are binary; raises if only one class is present."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores/labels length mismatch")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks on ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks count
    as a perfect match."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError("mask shape mismatch")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


MAX_EXACT_THRESHOLDS = 1024


def pro_at_fpr(
    score_maps: np.ndarray,
    gt_masks: np.ndarray,
    fpr_cap: float = 0.05,
) -> float:
    """Per-region overlap averaged over anomalous regions, integrated over
    the false-positive-rate axis up to `fpr_cap` and normalized by the cap.

    score_maps (N, H, W) float, gt_masks (N, H, W) binary. Thresholding uses
    the `score >= t` convention; every unique score is swept exactly when
    there are at most 1024 of them, otherwise a quantile grid is used."""
    score_maps = np.asarray(score_maps, dtype=np.float64)
    gt_masks = np.asarray(gt_masks).astype(bool)
    if score_maps.shape != gt_masks.shape:
        raise ValueError("shape mismatch")
    if score_maps.ndim != 3:
        raise ValueError("expected (N, H, W) stacks")

    # per connected anomaly region: sorted scores, for fast recall lookup
    region_scores: list[np.ndarray] = []
    for sm, gm in zip(score_maps, gt_masks):
        lab, n = ndimage.label(gm)
        for r in range(1, n + 1):
            region_scores.append(np.sort(sm[lab == r]))
    if not region_scores:
        raise ValueError("no anomalous regions in ground truth")
    negatives = np.sort(score_maps[~gt_masks])
    if negatives.size == 0:
        raise ValueError("no normal pixels in ground truth")

    uniq = np.unique(score_maps)
    if uniq.size <= MAX_EXACT_THRESHOLDS:
        thresholds = uniq
    else:
        qs = np.linspace(0.0, 1.0, MAX_EXACT_THRESHOLDS)
        thresholds = np.unique(np.quantile(score_maps.ravel(), qs))

    fprs, pros = [], []
    for t in thresholds[::-1]:  # descending: FPR grows along the curve
        fpr = (negatives.size - np.searchsorted(negatives, t, side="left")) / negatives.size
        rec = [
            (rs.size - np.searchsorted(rs, t, side="left")) / rs.size for rs in region_scores
        ]
        fprs.append(fpr)
        pros.append(float(np.mean(rec)))
        if fpr >= fpr_cap and len(fprs) > 1:
            break
    fprs = np.array([0.0] + fprs)
    pros = np.array([0.0] + pros)

    # clip the last segment exactly at the cap
    if fprs[-1] > fpr_cap:
        i = int(np.searchsorted(fprs, fpr_cap))
        f0, f1 = fprs[i - 1], fprs[i]
        w = (fpr_cap - f0) / (f1 - f0) if f1 > f0 else 0.0
        p_cap = pros[i - 1] + w * (pros[i] - pros[i - 1])
        fprs = np.concatenate([fprs[:i], [fpr_cap]])
        pros = np.concatenate([pros[:i], [p_cap]])
    elif fprs[-1] < fpr_cap:
        # curve never reaches the cap: extend flat
        fprs = np.concatenate([fprs, [fpr_cap]])
        pros = np.concatenate([pros, [pros[-1]]])
    return float(np.trapezoid(pros, fprs) / fpr_cap)


def diversity_entropy(
    images: list[np.ndarray], rule: CompositionRule
) -> tuple[float, dict[tuple[int, ...], int]]:
    """Shannon entropy (bits) of the distribution of component-count vectors
    across a set of images, counted by the rule-independent color classifier."""
    hist: dict[tuple[int, ...], int] = {}
    for img in images:
        counts = classify_components(img, rule)
        key = tuple(counts[c.ctype.name] for c in rule.components)
        hist[key] = hist.get(key, 0) + 1
    total = sum(hist.values())
    probs = np.array([v / total for v in hist.values()], dtype=np.float64)
    ent = float(-(probs * np.log2(probs)).sum()) if probs.size else 0.0
    return ent, hist


# ---------------------------------------------------------------------------
# Deterministic metrics files


def format_metrics(metrics: dict[str, float | int | str]) -> str:
    """Sorted key=value lines with fixed float formatting (bit-stable)."""
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        if isinstance(v, bool):
            lines.append(f"{k}={str(v).lower()}")
        elif isinstance(v, float) or isinstance(v, np.floating):
            f = float(v)
            if f == 0.0:
                f = 0.0  # avoid the -0.0 representation
            lines.append(f"{k}={f:.10f}")
        else:
            lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def write_metrics(path: str, metrics: dict) -> None:
    with open(path, "w") as fh:
        fh.write(format_metrics(metrics))


def read_metrics(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                out[k] = v
    return out
