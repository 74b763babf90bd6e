"""Text-to-component residual mapping: aggregate recorded cross-attention,
take token-wise residuals between a generated anomaly and its reconstructed
nearest normal reference, and binarize into training masks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .ddim import ddim_invert, ddim_reconstruct, make_eps_fn
from .textenc import TokenSeq
from .unet import AttentionStack

log = logging.getLogger(__name__)

ATTN_GRID = 16
SMOOTH_SIGMA = 1.0
MIN_COMPONENT_FRACTION = 0.001  # connected components below 0.1% of area drop


def _gaussian3(sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    x = np.arange(3, dtype=np.float64) - 1.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g[:, None] * g[None, :]


def gaussian_smooth3(m: np.ndarray, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """3x3 Gaussian smoothing with reflective padding (mass preserving on
    constant maps)."""
    k = _gaussian3(sigma)
    return ndimage.convolve(m.astype(np.float64), k, mode="reflect")


@dataclass
class TokenAttentionMap:
    """Smoothed 16x16 attention maps per learnable noun."""

    maps: dict[str, np.ndarray]
    provenance: str = "gen"  # gen | norm
    grid: int = ATTN_GRID

    def nouns(self) -> list[str]:
        return list(self.maps)


def aggregate_attention(
    stack: AttentionStack,
    tokens: TokenSeq,
    slot_nouns: tuple[str, ...],
    batch_index: int = 0,
    provenance: str = "gen",
) -> TokenAttentionMap:
    """Per-noun smoothed 16x16 maps at the final denoising step (t = 0 entry).

    Averages heads and every 16x16 attention layer, sums the columns of a
    noun's occurrences (total attention mass routed to that component), then
    applies the 3x3 Gaussian. A noun absent from the prompt maps to zeros.
    """
    if not stack.maps:
        raise ValueError("attention stack is empty")
    t0 = min(stack.timesteps)
    layers = stack.layers_at_grid(t0, ATTN_GRID)
    if not layers:
        raise ValueError("no 16x16 attention layers recorded")
    # (heads, hw, n) averaged over layers and heads
    avg = torch.stack([m[batch_index] for m in layers]).mean(dim=(0, 1)).double().numpy()
    hw = avg.shape[0]
    g = int(round(np.sqrt(hw)))
    maps: dict[str, np.ndarray] = {}
    for noun in slot_nouns:
        positions = [
            pos
            for pos, sidx in zip(tokens.slot_positions, tokens.slot_indices)
            if slot_nouns[sidx] == noun
        ]
        if positions:
            m = avg[:, positions].sum(axis=1).reshape(g, g)
        else:
            m = np.zeros((g, g))
        maps[noun] = gaussian_smooth3(m)
    return TokenAttentionMap(maps, provenance=provenance, grid=g)


def _unit_mass(m: np.ndarray) -> np.ndarray:
    s = m.sum()
    return m / s if s > 0 else m


def residual_mask(
    a_gen: TokenAttentionMap, a_norm: TokenAttentionMap, out_size: int = 64
) -> np.ndarray:
    """Heatmap in [0,1]: upsampled sum over tokens of |A_norm - A_gen|.

    Each token map is rescaled to unit mass before differencing. Attention
    rows are softmax-normalized over the prompt, so a token's overall level
    shifts with prompt length; without the rescale that constant offset
    between the edited and full prompt drowns the spatial signal.
    """
    if set(a_gen.maps) != set(a_norm.maps):
        raise ValueError("token sets differ")
    total = None
    for noun in a_gen.maps:
        mg, mn = a_gen.maps[noun], a_norm.maps[noun]
        if mg.shape != mn.shape:
            raise ValueError(f"grid mismatch for {noun!r}")
        r = np.abs(_unit_mass(mn) - _unit_mass(mg))
        total = r if total is None else total + r
    t = torch.from_numpy(total)[None, None]
    up = F.interpolate(t, size=(out_size, out_size), mode="bilinear", align_corners=False)
    heat = up[0, 0].numpy()
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a histogram of the values."""
    hist, edges = np.histogram(values.ravel(), bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    total = hist.sum()
    if total == 0:
        return 0.0
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = total - w0
    mu = np.cumsum(hist * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = mu / w0
        m1 = (mu_total - mu) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between[~np.isfinite(between)] = -1.0
    # upper edge of the winning bin, so its own values fall below threshold
    return float(edges[int(np.argmax(between)) + 1])


def binarize(heatmap: np.ndarray) -> np.ndarray:
    """Otsu threshold plus removal of sub-0.1%-area connected components."""
    if heatmap.min() < -1e-9 or heatmap.max() > 1 + 1e-9:
        raise ValueError("heatmap must lie in [0, 1]")
    if heatmap.max() <= 0:
        return np.zeros_like(heatmap, dtype=bool)
    th = otsu_threshold(heatmap)
    mask = heatmap > th
    min_area = MIN_COMPONENT_FRACTION * heatmap.size
    labels, n = ndimage.label(mask)
    for k in range(1, n + 1):
        comp = labels == k
        if comp.sum() < min_area:
            mask[comp] = False
    return mask


@dataclass
class AnomalySample:
    image: np.ndarray  # H x W x 3 in [0,1]
    mask: np.ndarray  # bool H x W
    heatmap: np.ndarray  # H x W in [0,1]
    provenance: dict = field(default_factory=dict)


def generate_pairs(
    candidates: list,
    art,  # difftrain.PretrainedArtifacts with MCL-trained slot table
    ref_images: list[np.ndarray],
    T: int = 50,
    batch_size: int = 16,
) -> list[AnomalySample]:
    """Stage-II pipeline over accepted candidates.

    Each candidate must carry its generation attention (A_gen), a nearest
    reference index, and its unedited full prompt. The reference is DDIM
    inverted and reconstructed under the full prompt to record A_norm.
    """
    from .textenc import encode_batch, tokenize

    samples: list[AnomalySample] = []
    slot_nouns = art.table.slot_nouns
    for cand in candidates:
        if cand.nn_index is None or cand.attention is None:
            raise ValueError("candidate lacks distance filtering or recorded attention")

    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start : start + batch_size]
        refs = torch.stack(
            [
                torch.as_tensor(ref_images[c.nn_index], dtype=torch.float32).permute(2, 0, 1)
                for c in chunk
            ]
        )
        full_tokens = [tokenize(c.full_prompt, art.vocab, slot_nouns) for c in chunk]
        with torch.no_grad():
            cond, cmask = encode_batch(full_tokens, art.table, art.text_encoder)
        eps_fn = make_eps_fn(art.model, cond, cmask)
        traj = ddim_invert(eps_fn, art.schedule, refs, T=T)
        _, stack = ddim_reconstruct(eps_fn, art.schedule, traj[-1], T=T, record=True)
        for bi, cand in enumerate(chunk):
            if isinstance(cand.attention, TokenAttentionMap):
                a_gen = cand.attention  # pre-aggregated (e.g. reloaded from disk)
            else:
                a_gen = aggregate_attention(cand.attention, cand.tokens, slot_nouns,
                                            batch_index=cand.batch_index, provenance="gen")
            a_norm = aggregate_attention(stack, full_tokens[bi], slot_nouns,
                                         batch_index=bi, provenance="norm")
            heat = residual_mask(a_gen, a_norm, out_size=cand.image.shape[0])
            mask = binarize(heat)
            samples.append(
                AnomalySample(
                    image=cand.image,
                    mask=mask,
                    heatmap=heat,
                    provenance={
                        "prompt": cand.prompt,
                        "full_prompt": cand.full_prompt,
                        "edit": cand.edit_kind,
                        "seed": cand.seed,
                        "nn_index": cand.nn_index,
                        "delta": cand.delta,
                    },
                )
            )
    return samples
