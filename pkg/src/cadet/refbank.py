"""Reference neighbor association: multi-scale encoder, memory bank of
normal references, nearest-neighbor search, differential features and the
SSIM-based distance band.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ssim as ssim_mod
from .scenegen import CompositionRule, Placement, SceneSpec, render_scene

log = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    f1: torch.Tensor  # (32, 32, 32)
    f2: torch.Tensor  # (64, 16, 16)
    f3: torch.Tensor  # (128, 8, 8)

    def scales(self) -> list[torch.Tensor]:
        return [self.f1, self.f2, self.f3]


@dataclass
class DiffPyramid:
    d1: torch.Tensor
    d2: torch.Tensor
    d3: torch.Tensor
    m1: torch.Tensor  # channel means, (h, w)
    m2: torch.Tensor
    m3: torch.Tensor

    def diffs(self) -> list[torch.Tensor]:
        return [self.d1, self.d2, self.d3]

    def means(self) -> list[torch.Tensor]:
        return [self.m1, self.m2, self.m3]


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
    )


class FeatureEncoder(nn.Module):
    """3-block conv encoder; block outputs form the feature pyramid.

    Trained on multi-label component-presence prediction over randomized
    scenes (the desk-scale stand-in for an ImageNet backbone).
    """

    CHANNELS = (32, 64, 128)

    def __init__(self, n_components: int):
        super().__init__()
        c1, c2, c3 = self.CHANNELS
        self.block1 = _block(3, c1)
        self.block2 = _block(c1, c2)
        self.block3 = _block(c2, c3)
        self.head = nn.Linear(c3, n_components)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        f1 = self.block1(x)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        logits = self.head(f3.mean(dim=(2, 3)))
        return f1, f2, f3, logits

    @torch.no_grad()
    def encode(self, image: np.ndarray | torch.Tensor) -> FeaturePyramid:
        """Pyramid of a single H x W x 3 image in [0,1]."""
        x = _to_chw(image)[None]
        f1, f2, f3, _ = self.forward(x)
        return FeaturePyramid(f1[0], f2[0], f3[0])

    @torch.no_grad()
    def encode_batch(self, images: list) -> list[FeaturePyramid]:
        x = torch.stack([_to_chw(im) for im in images])
        f1, f2, f3, _ = self.forward(x)
        return [FeaturePyramid(f1[i], f2[i], f3[i]) for i in range(len(images))]


def _to_chw(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.ndim == 3 and t.shape[-1] == 3:
        t = t.permute(2, 0, 1)
    return t


class EncoderTrainingError(RuntimeError):
    pass


def _aux_scene(rule: CompositionRule, rng: np.random.Generator):
    """Random component subsets (rule constraints ignored) for the aux task."""
    placements = []
    used: set[int] = set()
    present = np.zeros(len(rule.components), dtype=np.float32)
    for k, rc in enumerate(rule.components):
        count = int(rng.integers(0, rc.count_range[1] + 1))
        free = [s for s in range(rule.n_slots) if s not in used]
        count = min(count, len(free))
        if count > 0:
            present[k] = 1.0
        for si in rng.choice(len(free), size=count, replace=False) if count else []:
            slot = free[int(si)]
            used.add(slot)
            color = rc.ctype.palette[int(rng.integers(len(rc.ctype.palette)))]
            placements.append(Placement(rc.ctype.name, slot, color, int(rng.integers(4))))
    spec = SceneSpec(placements)
    img, _, _ = render_scene(spec, rule, seed=int(rng.integers(1 << 31)), jitter=True)
    return img, present


def train_encoder(
    rule: CompositionRule,
    seed: int = 0,
    n_train: int = 384,
    n_val: int = 96,
    batch_size: int = 32,
    max_epochs: int = 40,
    lr: float = 2e-3,
    f1_target: float = 0.9,
) -> tuple[FeatureEncoder, list[float]]:
    """Train the presence classifier until validation F1 >= f1_target."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    train = [_aux_scene(rule, rng) for _ in range(n_train)]
    val = [_aux_scene(rule, rng) for _ in range(n_val)]

    enc = FeatureEncoder(len(rule.components))
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    curve: list[float] = []
    for epoch in range(max_epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(train), batch_size):
            batch = [train[j] for j in order[i : i + batch_size]]
            x = torch.stack([_to_chw(im) for im, _ in batch])
            y = torch.from_numpy(np.stack([p for _, p in batch]))
            _, _, _, logits = enc(x)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        f1 = _val_f1(enc, val)
        curve.append(f1)
        if f1 >= f1_target:
            enc.eval()
            return enc, curve
    raise EncoderTrainingError(f"encoder did not reach F1 {f1_target}; curve={curve}")


@torch.no_grad()
def _val_f1(enc: FeatureEncoder, val) -> float:
    x = torch.stack([_to_chw(im) for im, _ in val])
    y = np.stack([p for _, p in val])
    _, _, _, logits = enc(x)
    pred = (torch.sigmoid(logits).numpy() > 0.5).astype(np.float32)
    tp = float((pred * y).sum())
    fp = float((pred * (1 - y)).sum())
    fn = float(((1 - pred) * y).sum())
    if tp == 0:
        return 0.0
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


class MemoryBank:
    """Immutable stacks of reference pyramids at all three scales."""

    def __init__(self, pyramids: list[FeaturePyramid], image_ids: list[str] | None = None):
        if not pyramids:
            raise ValueError("memory bank needs at least one reference image")
        self.m1 = torch.stack([p.f1 for p in pyramids])
        self.m2 = torch.stack([p.f2 for p in pyramids])
        self.m3 = torch.stack([p.f3 for p in pyramids])
        self.image_ids = list(image_ids) if image_ids else [str(i) for i in range(len(pyramids))]

    def __len__(self) -> int:
        return self.m1.shape[0]

    def entry(self, i: int) -> FeaturePyramid:
        return FeaturePyramid(self.m1[i], self.m2[i], self.m3[i])

    def scales(self) -> list[torch.Tensor]:
        return [self.m1, self.m2, self.m3]

    def save(self, path: str):
        from .artifacts import save_tensors

        save_tensors(
            path,
            {"m1": self.m1, "m2": self.m2, "m3": self.m3},
            {"image_ids": self.image_ids},
        )

    @staticmethod
    def load(path: str) -> "MemoryBank":
        from .artifacts import load_tensors

        arrays, meta = load_tensors(path)
        bank = MemoryBank.__new__(MemoryBank)
        bank.m1 = torch.from_numpy(arrays["m1"])
        bank.m2 = torch.from_numpy(arrays["m2"])
        bank.m3 = torch.from_numpy(arrays["m3"])
        bank.image_ids = list(meta.get("image_ids", []))
        return bank


def build_bank(
    images: list, encoder: FeatureEncoder, image_ids: list[str] | None = None
) -> MemoryBank:
    if len(images) == 0:
        raise ValueError("cannot build a memory bank from zero images")
    pyramids = encoder.encode_batch(images)
    return MemoryBank(pyramids, image_ids)


def nearest_reference(feat: FeaturePyramid, bank: MemoryBank) -> tuple[int, FeaturePyramid]:
    """Exhaustive argmin over the bank of the summed per-scale L2 norms."""
    scores = torch.zeros(len(bank), dtype=torch.float64)
    for f, m in zip(feat.scales(), bank.scales()):
        diff = (m - f[None]).reshape(len(bank), -1).double()
        scores += diff.norm(dim=1)
    idx = int(torch.argmin(scores))  # argmin takes the first minimum: lowest index
    return idx, bank.entry(idx)


def diff_features(feat: FeaturePyramid, ref: FeaturePyramid) -> DiffPyramid:
    """Element-wise absolute differences and their channel means."""
    ds = []
    for f, r in zip(feat.scales(), ref.scales()):
        if f.shape != r.shape:
            raise ValueError(f"shape mismatch {tuple(f.shape)} vs {tuple(r.shape)}")
        ds.append((f - r).abs())
    return DiffPyramid(*ds, *[d.mean(dim=0) for d in ds])


def ssim_distance(feat: FeaturePyramid, ref: FeaturePyramid) -> tuple[float, float]:
    """(d, delta): d = sum of per-scale channel-wise SSIM in [-3, 3];
    delta = sum of (1 - SSIM)/2 in [0, 3], the dissimilarity used for the
    acceptance band."""
    d = 0.0
    for f, r in zip(feat.scales(), ref.scales()):
        d += ssim_mod.ssim_channelwise(f, r)
    delta = (3.0 - d) / 2.0
    return d, delta
