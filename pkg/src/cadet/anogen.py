"""Anomaly generation: prompt modifications, low-density prompt sampling,
and the SSIM distance band that keeps generations usable as anomalies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .ddim import ddim_sample, make_eps_fn
from .prompts import make_template_prompt, num_templates, parse_caption
from .refbank import FeatureEncoder, MemoryBank, nearest_reference, ssim_distance
from .scenegen import CompositionRule, sample_normal
from .textenc import MAX_CONTEXT, TokenSeq, encode_batch, tokenize
from .unet import AttentionStack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptEdit:
    kind: str  # remove | duplicate | swap | recolor-adjective
    target: int  # item index among the prompt's noun items
    payload: Optional[str | int] = None  # swap partner index or new color word


def modify_prompt(prompt: str, edit: PromptEdit) -> str:
    """Apply a structural edit to a templated caption, preserving the template."""
    tid, items = parse_caption(prompt)
    if not 0 <= edit.target < len(items):
        raise ValueError(f"edit target {edit.target} is not a noun item of the prompt")
    items = list(items)
    if edit.kind == "remove":
        del items[edit.target]
    elif edit.kind == "duplicate":
        items.insert(edit.target + 1, items[edit.target])
    elif edit.kind == "swap":
        j = int(edit.payload)
        if not 0 <= j < len(items):
            raise ValueError(f"swap partner {j} is not a noun item of the prompt")
        items[edit.target], items[j] = items[j], items[edit.target]
    elif edit.kind == "recolor-adjective":
        adj, noun = items[edit.target]
        if adj is None:
            raise ValueError("recolor-adjective needs an adjective-bearing item")
        items[edit.target] = (str(edit.payload), noun)
    else:
        raise ValueError(f"unknown edit kind {edit.kind!r}")
    nouns = [n for _, n in items]
    adjs = [a for a, _ in items]
    has_adjs = any(a is not None for a in adjs)
    return make_template_prompt(nouns, tid, adjectives=adjs if has_adjs else None)


@dataclass
class GenCandidate:
    image: np.ndarray  # H x W x 3 in [0,1]
    prompt: str
    full_prompt: str  # pre-edit prompt (equal to prompt for pure LS draws)
    edit_kind: str  # remove | duplicate | swap | recolor-adjective | ls
    seed: int
    tokens: TokenSeq
    attention: Optional[AttentionStack] = None
    batch_index: int = 0
    d: Optional[float] = None
    delta: Optional[float] = None
    nn_index: Optional[int] = None


DEFAULT_EDIT_MIX = (("remove", 0.4), ("duplicate", 0.2), ("swap", 0.2), ("ls", 0.2))


def _ls_prompt(rule: CompositionRule, rng: np.random.Generator) -> str:
    """A template draw over component-count combinations, including ones
    absent from the normal data."""
    tid = int(rng.integers(num_templates()))
    nouns: list[str] = []
    adjs: list[str] = []
    for rc in rule.components:
        count = int(rng.integers(0, rc.count_range[1] + 1))
        for _ in range(count):
            nouns.append(rc.ctype.name)
            adjs.append(rc.ctype.palette[int(rng.integers(len(rc.ctype.palette)))])
    return make_template_prompt(nouns, tid, adjectives=adjs)


def _edited_prompt(
    rule: CompositionRule, kind: str, rng: np.random.Generator
) -> tuple[str, str]:
    """(edited prompt, full pre-edit prompt) for one PM draw."""
    spec = sample_normal(rule, int(rng.integers(1 << 31)))
    tid = int(rng.integers(num_templates()))
    nouns = [p.component for p in spec.placements]
    adjs = [p.color for p in spec.placements]
    full = make_template_prompt(nouns, tid, adjectives=adjs)
    counts = spec.counts()
    if kind == "none":
        return full, full  # unedited draw (ablation control)
    if kind == "remove":
        # Prefer removing an occurrence whose count stays >= 1, keeping the
        # per-type marginals inside the training distribution.
        eligible = [i for i, n in enumerate(nouns) if counts[n] >= 2] or list(range(len(nouns)))
        edit = PromptEdit("remove", int(rng.choice(eligible)))
    elif kind == "duplicate":
        if len(full.split()) + 4 > MAX_CONTEXT:
            # duplication inserts "and a <adj> <noun>"; a full-length caption
            # can't grow, so fall back to the other count anomaly
            eligible = [i for i, n in enumerate(nouns) if counts[n] >= 2] or list(range(len(nouns)))
            edit = PromptEdit("remove", int(rng.choice(eligible)))
        else:
            eligible = [i for i, n in enumerate(nouns) if counts[n] <= 2] or list(range(len(nouns)))
            edit = PromptEdit("duplicate", int(rng.choice(eligible)))
    elif kind == "swap":
        pairs = [
            (i, j)
            for i in range(len(nouns))
            for j in range(i + 1, len(nouns))
            if nouns[i] != nouns[j]
        ]
        if not pairs:
            return full, full
        i, j = pairs[int(rng.integers(len(pairs)))]
        edit = PromptEdit("swap", i, j)
    elif kind == "recolor-adjective":
        i = int(rng.integers(len(nouns)))
        colors = [c for c in ("red", "blue", "green", "yellow", "magenta", "cyan", "orange")
                  if c != adjs[i]]
        edit = PromptEdit("recolor-adjective", i, colors[int(rng.integers(len(colors)))])
    else:
        raise ValueError(f"unknown edit kind {kind!r}")
    return modify_prompt(full, edit), full


def sample_candidates(
    art,  # difftrain.PretrainedArtifacts with trained slots
    rule: CompositionRule,
    n: int,
    seed: int = 0,
    T: int = 50,
    edit_mix=DEFAULT_EDIT_MIX,
    batch_size: int = 16,
    image_size: int = 64,
) -> list[GenCandidate]:
    """Draw n generation candidates with full provenance (PM edits + LS draws).

    Every candidate's image is a deterministic function of (its seed, its
    prompt); generation attention is recorded at the final denoising step.
    """
    rng = np.random.default_rng(seed)
    slot_nouns = art.table.slot_nouns
    kinds = [k for k, _ in edit_mix]
    probs = np.array([p for _, p in edit_mix], dtype=float)
    probs /= probs.sum()

    drafts = []
    for i in range(n):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        if kind == "ls":
            prompt = full = _ls_prompt(rule, rng)
        else:
            prompt, full = _edited_prompt(rule, kind, rng)
        drafts.append((prompt, full, kind, int(rng.integers(1 << 31))))

    out: list[GenCandidate] = []
    for start in range(0, n, batch_size):
        chunk = drafts[start : start + batch_size]
        token_seqs = [tokenize(p, art.vocab, slot_nouns) for p, _, _, _ in chunk]
        with torch.no_grad():
            cond, cmask = encode_batch(token_seqs, art.table, art.text_encoder)
        x_init = torch.stack(
            [
                torch.randn(3, image_size, image_size,
                            generator=torch.Generator().manual_seed(s))
                for _, _, _, s in chunk
            ]
        )
        eps_fn = make_eps_fn(art.model, cond, cmask)
        imgs, stack = ddim_sample(
            eps_fn, art.schedule, x_init.shape, T=T, record=True, x_init=x_init
        )
        for bi, (prompt, full, kind, s) in enumerate(chunk):
            out.append(
                GenCandidate(
                    image=imgs[bi].permute(1, 2, 0).numpy().astype(np.float32),
                    prompt=prompt,
                    full_prompt=full,
                    edit_kind=kind,
                    seed=s,
                    tokens=token_seqs[bi],
                    attention=stack,
                    batch_index=bi,
                )
            )
    return out


def filter_by_distance(
    candidates: list[GenCandidate],
    bank: MemoryBank,
    encoder: FeatureEncoder,
    delta_min: float,
    delta_max: float,
) -> list[GenCandidate]:
    """Fill (d, delta, nn_index) on every candidate; return those inside the band."""
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    accepted = []
    for cand in candidates:
        feat = encoder.encode(cand.image)
        idx, ref = nearest_reference(feat, bank)
        d, delta = ssim_distance(feat, ref)
        cand.d, cand.delta, cand.nn_index = d, delta, idx
        if delta_min <= delta <= delta_max:
            accepted.append(cand)
    return accepted


def calibrate_band(
    heldout_normals: list[np.ndarray],
    bank: MemoryBank,
    encoder: FeatureEncoder,
    percentile: float = 95.0,
    widen: float = 3.0,
) -> tuple[float, float]:
    """delta_min = the given percentile of held-out-normal deltas vs the bank;
    delta_max = widen * delta_min, floored at the midpoint between delta_min
    and the delta of uniform noise.

    The noise floor keeps the ceiling meaningful when normals are so tightly
    clustered that widen * delta_min would reject every plausible generation,
    while still excluding out-of-domain samples (noise scores far above the
    midpoint by construction).
    """
    deltas = []
    for im in heldout_normals:
        feat = encoder.encode(im)
        _, ref = nearest_reference(feat, bank)
        _, delta = ssim_distance(feat, ref)
        deltas.append(delta)
    dmin = float(np.percentile(deltas, percentile))

    rng = np.random.default_rng(0)
    shape = np.asarray(heldout_normals[0]).shape
    noise_deltas = []
    for _ in range(8):
        im = rng.random(shape).astype(np.float32)
        feat = encoder.encode(im)
        _, ref = nearest_reference(feat, bank)
        noise_deltas.append(ssim_distance(feat, ref)[1])
    dnoise = float(np.median(noise_deltas))
    dmax = max(widen * dmin, 0.5 * (dmin + dnoise))
    return dmin, dmax
