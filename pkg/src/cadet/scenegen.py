"""Procedural compositional scenes: rules, sampling, rendering, corpus building.

A scene is a small board (default 64x64) holding colored parametric glyphs
("components") placed on a slot grid. Composition rules define which
components may appear, how many, where, and the logical constraints that
make a scene "normal". The renderer also emits oracle component masks and a
caption, so every downstream stage can be checked against ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from PIL import Image as PILImage

from .prompts import make_template_prompt, num_templates

# ---------------------------------------------------------------------------
# Colors and glyphs

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.90, 0.80, 0.10),
    "magenta": (0.80, 0.15, 0.75),
    "cyan": (0.10, 0.75, 0.80),
    "orange": (0.90, 0.50, 0.10),
    "white": (0.95, 0.95, 0.95),
}

BOARD_COLOR = (0.18, 0.18, 0.20)

GLYPHS = ("circle", "square", "triangle", "cross", "ring", "bar")


def glyph_footprint(glyph: str, size: int, rotation: int = 0) -> np.ndarray:
    """Binary footprint of a glyph on a (2*size+3)^2 patch, centered.

    `size` is the half-extent in pixels; `rotation` is a multiple of 90
    degrees. Hard-edged (no anti-aliasing) so masks are exact.
    """
    n = 2 * size + 3
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n]
    dx = xx - c
    dy = yy - c
    for _ in range(rotation % 4):
        dx, dy = dy, -dx
    if glyph == "circle":
        m = dx * dx + dy * dy <= size * size
    elif glyph == "square":
        m = (np.abs(dx) <= size - 1) & (np.abs(dy) <= size - 1)
    elif glyph == "triangle":
        m = (dy >= -size) & (dy <= size - 1) & (2 * np.abs(dx) <= (size - dy))
    elif glyph == "cross":
        w = max(1, size // 2 - 1)
        m = ((np.abs(dx) <= w) & (np.abs(dy) <= size)) | (
            (np.abs(dy) <= w) & (np.abs(dx) <= size)
        )
    elif glyph == "ring":
        d2 = dx * dx + dy * dy
        m = (d2 <= size * size) & (d2 > (size - 3) * (size - 3))
    elif glyph == "bar":
        w = max(1, size // 2 - 1)
        m = (np.abs(dx) <= w) & (np.abs(dy) <= size)
    else:
        raise ValueError(f"unknown glyph {glyph!r}")
    return m.astype(bool)


def glyph_pixel_count(glyph: str, size: int, rotation: int = 0) -> int:
    """Analytic pixel count of a glyph footprint (same predicate, enumerated)."""
    return int(glyph_footprint(glyph, size, rotation).sum())


# ---------------------------------------------------------------------------
# Rule model


@dataclass(frozen=True)
class ComponentType:
    name: str
    glyph: str
    size: int
    palette: tuple[str, ...]  # allowed color names

    def __post_init__(self):
        if self.glyph not in GLYPHS:
            raise ValueError(f"unknown glyph {self.glyph!r}")
        for c in self.palette:
            if c not in COLORS:
                raise ValueError(f"unknown color {c!r}")


@dataclass(frozen=True)
class Constraint:
    """Predicate over a SceneSpec.

    kinds:
      count_equals(a, b)        - count(a) == count(b)
      count_sum(a, b, total)    - count(a) + count(b) == total
      count_range(a, lo, hi)    - lo <= count(a) <= hi
      in_region(a, cols/rows)   - every `a` sits in the allowed slot region
      left_of(a, b)             - every a-column < every b-column
      palette_ok()              - every placement uses its type's palette
    """

    kind: str
    args: tuple = ()

    def holds(self, spec: "SceneSpec", rule: "CompositionRule") -> bool:
        counts = spec.counts()
        if self.kind == "count_equals":
            a, b = self.args
            return counts.get(a, 0) == counts.get(b, 0)
        if self.kind == "count_sum":
            a, b, total = self.args
            return counts.get(a, 0) + counts.get(b, 0) == total
        if self.kind == "count_range":
            a, lo, hi = self.args
            return lo <= counts.get(a, 0) <= hi
        if self.kind == "in_region":
            a, region = self.args
            return all(p.slot in region for p in spec.placements if p.component == a)
        if self.kind == "left_of":
            a, b = self.args
            acols = [p.slot % rule.grid_cols for p in spec.placements if p.component == a]
            bcols = [p.slot % rule.grid_cols for p in spec.placements if p.component == b]
            return all(ca < cb for ca in acols for cb in bcols)
        if self.kind == "palette_ok":
            by_name = {ct.name: ct for ct in rule.component_types()}
            return all(p.color in by_name[p.component].palette for p in spec.placements)
        raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass(frozen=True)
class RuleComponent:
    ctype: ComponentType
    count_range: tuple[int, int]
    slot_region: tuple[int, ...]  # allowed slot indices


@dataclass(frozen=True)
class CompositionRule:
    name: str
    components: tuple[RuleComponent, ...]
    grid_rows: int = 4
    grid_cols: int = 4
    image_size: int = 64
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        if len(self.components) < 2:
            raise ValueError("a rule needs at least 2 component types")
        names = [rc.ctype.name for rc in self.components]
        if len(set(names)) != len(names):
            raise ValueError("component names must be unique within a rule")
        declared = set(names)
        for c in self.constraints:
            for a in c.args:
                if isinstance(a, str) and a not in declared and a not in COLORS:
                    raise ValueError(f"constraint references undeclared component {a!r}")

    def component_types(self) -> list[ComponentType]:
        return [rc.ctype for rc in self.components]

    def nouns(self) -> list[str]:
        return [rc.ctype.name for rc in self.components]

    @property
    def n_slots(self) -> int:
        return self.grid_rows * self.grid_cols

    def slot_center(self, slot: int) -> tuple[int, int]:
        cell = self.image_size // self.grid_cols
        r, c = divmod(slot, self.grid_cols)
        return (r * cell + cell // 2, c * cell + cell // 2)


@dataclass(frozen=True)
class Placement:
    component: str
    slot: int
    color: str
    rotation: int = 0


@dataclass
class Scratch:
    y0: int
    x0: int
    y1: int
    x1: int
    width: int = 1
    color: str = "white"


@dataclass
class SceneSpec:
    placements: list[Placement]
    label: str = "normal"
    scratches: list[Scratch] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.placements:
            out[p.component] = out.get(p.component, 0) + 1
        return out

    def satisfies(self, rule: CompositionRule) -> bool:
        return all(c.holds(self, rule) for c in rule.constraints)

    def violated(self, rule: CompositionRule) -> list[Constraint]:
        return [c for c in rule.constraints if not c.holds(self, rule)]


# ---------------------------------------------------------------------------
# Shipped rule set (three categories)


def _region(rows: range, cols: range, grid_cols: int = 4) -> tuple[int, ...]:
    return tuple(r * grid_cols + c for r in rows for c in cols)

ALL_SLOTS = _region(range(4), range(4))


def builtin_rules() -> dict[str, CompositionRule]:
    # two palette colors per type: the per-scene color scheme appears in the
    # caption, so denoising depends on the text (palettes disjoint per rule)
    pin = ComponentType("pin", "circle", 5, ("red", "yellow"))
    bolt = ComponentType("bolt", "square", 5, ("blue", "magenta"))
    cap = ComponentType("cap", "circle", 5, ("green", "red"))
    tube = ComponentType("tube", "bar", 6, ("yellow", "cyan"))
    screw = ComponentType("screw", "cross", 6, ("magenta", "green"))
    washer = ComponentType("washer", "ring", 6, ("cyan", "orange"))

    right = _region(range(4), range(2, 4))
    bottom = _region(range(2, 4), range(4))
    left = _region(range(4), range(0, 2))

    rules = {
        "pinboard": CompositionRule(
            name="pinboard",
            components=(
                RuleComponent(pin, (1, 3), ALL_SLOTS),
                RuleComponent(bolt, (1, 3), right),
            ),
            constraints=(
                Constraint("count_equals", ("pin", "bolt")),
                Constraint("count_range", ("pin", 1, 3)),
                Constraint("count_range", ("bolt", 1, 3)),
                Constraint("in_region", ("bolt", right)),
                Constraint("palette_ok"),
            ),
        ),
        "capset": CompositionRule(
            name="capset",
            components=(
                RuleComponent(cap, (1, 3), ALL_SLOTS),
                RuleComponent(tube, (1, 3), bottom),
            ),
            constraints=(
                Constraint("count_sum", ("cap", "tube", 4)),
                Constraint("count_range", ("cap", 1, 3)),
                Constraint("count_range", ("tube", 1, 3)),
                Constraint("in_region", ("tube", bottom)),
                Constraint("palette_ok"),
            ),
        ),
        "fastbag": CompositionRule(
            name="fastbag",
            components=(
                RuleComponent(screw, (1, 3), ALL_SLOTS),
                RuleComponent(washer, (1, 3), left),
            ),
            constraints=(
                Constraint("count_equals", ("screw", "washer")),
                Constraint("count_range", ("screw", 1, 3)),
                Constraint("count_range", ("washer", 1, 3)),
                Constraint("in_region", ("washer", left)),
                Constraint("palette_ok"),
            ),
        ),
    }
    return rules


# ---------------------------------------------------------------------------
# Sampling


class UnsatisfiableRuleError(RuntimeError):
    pass


class InapplicableAnomalyError(ValueError):
    pass


MAX_REJECTION_ATTEMPTS = 2000


N_LAYOUT_PATTERNS = 4


def _pattern_slots(rule: CompositionRule, rc, count: int, n_free: int, layout_id: int):
    """Deterministic slot pattern for (rule, component, count, layout_id)."""
    key = zlib.crc32(f"{rule.name}/{rc.ctype.name}".encode())
    prng = np.random.default_rng([key, count, layout_id])
    return prng.choice(n_free, size=count, replace=False)


def sample_normal(rule: CompositionRule, seed: int) -> SceneSpec:
    """Rejection-sample a SceneSpec satisfying every constraint of `rule`.

    Slots come from a small pool of per-count layout patterns, so each scene
    matches one of a few dozen product variants: diverse enough that the
    caption (counts, colors, layout pattern) carries real signal, small
    enough that a reference bank holds a layout-matched normal for any query.
    Fully random placement remains as a fallback for rules whose constraints
    no pattern satisfies.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_REJECTION_ATTEMPTS):
        layout_id = int(rng.integers(N_LAYOUT_PATTERNS))
        placements: list[Placement] = []
        used: set[int] = set()
        ok = True
        for rc in rule.components:
            lo, hi = rc.count_range
            count = int(rng.integers(lo, hi + 1))
            # one scheme color per type per scene, so the caption determines
            # the rendering and the text stream carries real signal
            color = rc.ctype.palette[int(rng.integers(len(rc.ctype.palette)))]
            free = [s for s in rc.slot_region if s not in used]
            if len(free) < count:
                ok = False
                break
            if attempt < MAX_REJECTION_ATTEMPTS // 2:
                slots = _pattern_slots(rule, rc, count, len(free), layout_id)
            else:
                slots = rng.choice(len(free), size=count, replace=False)
            for si in slots:
                slot = free[int(si)]
                used.add(slot)
                rot = int(rng.integers(4))
                placements.append(Placement(rc.ctype.name, slot, color, rot))
        if not ok:
            continue
        spec = SceneSpec(placements=placements, label="normal")
        if spec.satisfies(rule):
            return spec
    raise UnsatisfiableRuleError(
        f"no satisfying sample for rule {rule.name!r} after "
        f"{MAX_REJECTION_ATTEMPTS} attempts"
    )


ANOMALY_KINDS = ("missing", "extra", "misplaced", "recolored", "scratch")


def sample_oracle_anomaly(
    rule: CompositionRule, kind: str, seed: int
) -> tuple[SceneSpec, np.ndarray]:
    """Sample an anomalous spec plus its ground-truth change mask."""
    if kind not in ANOMALY_KINDS:
        raise InapplicableAnomalyError(f"unknown anomaly kind {kind!r}")
    rng = np.random.default_rng(seed ^ 0x5EED)
    base = sample_normal(rule, seed)
    H = rule.image_size
    mask = np.zeros((H, H), dtype=bool)

    if kind == "missing":
        if not base.placements:
            raise InapplicableAnomalyError("missing needs at least one placement")
        idx = int(rng.integers(len(base.placements)))
        removed = base.placements[idx]
        placements = [p for i, p in enumerate(base.placements) if i != idx]
        spec = SceneSpec(placements, label="missing", scratches=[])
        mask |= _placement_mask(rule, removed)
    elif kind == "extra":
        for _ in range(200):
            rc = rule.components[int(rng.integers(len(rule.components)))]
            used = {p.slot for p in base.placements}
            free = [s for s in rc.slot_region if s not in used]
            if not free:
                continue
            slot = free[int(rng.integers(len(free)))]
            color = rc.ctype.palette[int(rng.integers(len(rc.ctype.palette)))]
            added = Placement(rc.ctype.name, slot, color, int(rng.integers(4)))
            spec = SceneSpec(base.placements + [added], label="extra")
            if spec.violated(rule):
                mask |= _placement_mask(rule, added)
                break
        else:
            raise InapplicableAnomalyError("could not construct a violating extra")
    elif kind == "misplaced":
        movable = []
        for i, p in enumerate(base.placements):
            rc = next(r for r in rule.components if r.ctype.name == p.component)
            outside = [s for s in range(rule.n_slots) if s not in rc.slot_region]
            if outside:
                movable.append((i, outside))
        if not movable:
            raise InapplicableAnomalyError("no region-constrained component to misplace")
        i, outside = movable[int(rng.integers(len(movable)))]
        used = {p.slot for p in base.placements}
        outside = [s for s in outside if s not in used]
        if not outside:
            raise InapplicableAnomalyError("no free slot outside the allowed region")
        old = base.placements[i]
        new = dataclasses.replace(old, slot=outside[int(rng.integers(len(outside)))])
        placements = list(base.placements)
        placements[i] = new
        spec = SceneSpec(placements, label="misplaced")
        mask |= _placement_mask(rule, old) | _placement_mask(rule, new)
    elif kind == "recolored":
        if not base.placements:
            raise InapplicableAnomalyError("recolored needs at least one placement")
        i = int(rng.integers(len(base.placements)))
        old = base.placements[i]
        rc = next(r for r in rule.components if r.ctype.name == old.component)
        off_palette = [c for c in COLORS if c not in rc.ctype.palette and c != "white"]
        new = dataclasses.replace(old, color=off_palette[int(rng.integers(len(off_palette)))])
        placements = list(base.placements)
        placements[i] = new
        spec = SceneSpec(placements, label="recolored")
        mask |= _placement_mask(rule, new)
    else:  # scratch
        y0, x0 = int(rng.integers(4, H - 4)), int(rng.integers(4, H - 4))
        ang = rng.uniform(0, 2 * np.pi)
        length = int(rng.integers(16, 28))
        y1 = int(np.clip(y0 + length * np.sin(ang), 0, H - 1))
        x1 = int(np.clip(x0 + length * np.cos(ang), 0, H - 1))
        scratch = Scratch(y0, x0, y1, x1, width=2)
        spec = SceneSpec(list(base.placements), label="scratch", scratches=[scratch])
        mask |= _scratch_mask(H, scratch)

    if kind != "scratch" and not spec.violated(rule):
        raise InapplicableAnomalyError(
            f"anomaly kind {kind!r} failed to violate any constraint"
        )
    return spec, mask


# ---------------------------------------------------------------------------
# Rendering


@dataclass
class ComponentMasks:
    """Per-placement masks plus helpers; all boolean H x W."""

    instance_masks: list[np.ndarray]
    placements: list[Placement]
    shape: tuple[int, int]

    def by_type(self, name: str) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for m, p in zip(self.instance_masks, self.placements):
            if p.component == name:
                out |= m
        return out

    @property
    def union(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for m in self.instance_masks:
            out |= m
        return out


def _placement_mask(rule: CompositionRule, p: Placement, jitter=(0, 0)) -> np.ndarray:
    rc = next(r for r in rule.components if r.ctype.name == p.component)
    H = rule.image_size
    fp = glyph_footprint(rc.ctype.glyph, rc.ctype.size, p.rotation)
    cy, cx = rule.slot_center(p.slot)
    cy += jitter[0]
    cx += jitter[1]
    mask = np.zeros((H, H), dtype=bool)
    n = fp.shape[0]
    y0, x0 = cy - n // 2, cx - n // 2
    ys0, xs0 = max(0, y0), max(0, x0)
    ys1, xs1 = min(H, y0 + n), min(H, x0 + n)
    mask[ys0:ys1, xs0:xs1] = fp[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0]
    return mask


def _scratch_mask(H: int, s: Scratch) -> np.ndarray:
    mask = np.zeros((H, H), dtype=bool)
    n = max(abs(s.y1 - s.y0), abs(s.x1 - s.x0)) + 1
    ys = np.round(np.linspace(s.y0, s.y1, n)).astype(int)
    xs = np.round(np.linspace(s.x0, s.x1, n)).astype(int)
    for dy in range(s.width):
        for dx in range(s.width):
            yy = np.clip(ys + dy, 0, H - 1)
            xx = np.clip(xs + dx, 0, H - 1)
            mask[yy, xx] = True
    return mask


def render_scene(
    spec: SceneSpec,
    rule: CompositionRule,
    seed: int = 0,
    jitter: bool = False,
) -> tuple[np.ndarray, ComponentMasks, str]:
    """Render a spec to (image, masks, caption). Pure function of its arguments.

    With `jitter` enabled, brightness and per-component position receive a
    small seed-driven perturbation (train-time augmentation); masks track the
    jittered positions exactly.
    """
    rng = np.random.default_rng(seed)
    H = rule.image_size
    img = np.empty((H, H, 3), dtype=np.float32)
    img[:] = BOARD_COLOR

    instance_masks: list[np.ndarray] = []
    for p in spec.placements:
        jit = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2))) if jitter else (0, 0)
        m = _placement_mask(rule, p, jit)
        img[m] = COLORS[p.color]
        instance_masks.append(m)
    for s in spec.scratches:
        sm = _scratch_mask(H, s)
        img[sm] = COLORS[s.color]

    if jitter:
        img = img * (1.0 + rng.uniform(-0.04, 0.04))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    template_id = int(seed) % num_templates()
    nouns = [p.component for p in spec.placements]
    adjectives = [p.color for p in spec.placements]
    caption = make_template_prompt(nouns, template_id, adjectives=adjectives)
    masks = ComponentMasks(instance_masks, list(spec.placements), (H, H))
    return img, masks, caption


# ---------------------------------------------------------------------------
# Oracle component classifier (color-blob counting)

COLOR_TOL = 0.30
MIN_AREA_FRACTION = 0.35


def classify_components(image: np.ndarray, rule: CompositionRule) -> dict[str, int]:
    """Count components of each type in an (possibly generated) image.

    Oracle derived from the renderer's parameters: pixels within COLOR_TOL of
    a type's palette color form blobs; blobs above a minimum area count as
    one instance. Tolerant of diffusion blur but independent of any learned
    model.
    """
    from scipy import ndimage

    counts: dict[str, int] = {}
    for rc in rule.components:
        total = 0
        for cname in rc.ctype.palette:
            color = np.asarray(COLORS[cname], dtype=np.float32)
            dist = np.linalg.norm(image - color, axis=-1)
            blob = dist < COLOR_TOL
            labels, n = ndimage.label(blob)
            min_area = MIN_AREA_FRACTION * glyph_pixel_count(rc.ctype.glyph, rc.ctype.size)
            for k in range(1, n + 1):
                if (labels == k).sum() >= min_area:
                    total += 1
        counts[rc.ctype.name] = total
    return counts


# ---------------------------------------------------------------------------
# Corpus building


@dataclass
class ManifestRow:
    path: str
    split: str
    label: str
    rule: str
    seed: int
    caption: str
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    root: str
    rows: list[ManifestRow]

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def save(self, path: str):
        with open(path, "w") as f:
            for r in self.rows:
                f.write(json.dumps(dataclasses.asdict(r)) + "\n")

    @staticmethod
    def load(path: str) -> "DatasetManifest":
        rows = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    rows.append(ManifestRow(**json.loads(line)))
        return DatasetManifest(root=os.path.dirname(os.path.abspath(path)), rows=rows)


def save_image_png(path: str, image: np.ndarray):
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_image_png(path: str) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: str, mask: np.ndarray):
    PILImage.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def load_mask_png(path: str) -> np.ndarray:
    return np.asarray(PILImage.open(path).convert("L")) > 127


@dataclass
class CorpusConfig:
    rule_name: str = "pinboard"
    out_dir: str = "corpus"
    n_train: int = 240
    n_reference: int = 64
    n_test_normal: int = 40
    n_test_anomaly_per_kind: int = 8
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    base_seed: int = 0
    jitter_train: bool = True


def build_corpus(config: CorpusConfig, rule: Optional[CompositionRule] = None) -> DatasetManifest:
    """Render and persist a full train/reference/test corpus.

    Seed ranges of the four partitions are pairwise disjoint, derived from
    `base_seed` by fixed offsets.
    """
    if rule is None:
        rule = builtin_rules()[config.rule_name]
    root = config.out_dir
    os.makedirs(root, exist_ok=True)
    for sub in ("train", "reference", "test_normal", "test_anomaly", "gt_masks"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)

    rows: list[ManifestRow] = []
    b = config.base_seed

    def emit_normal(split: str, subdir: str, seed: int, jitter: bool):
        spec = sample_normal(rule, seed)
        img, _, caption = render_scene(spec, rule, seed=seed, jitter=jitter)
        rel = os.path.join(subdir, f"{split}_{seed:06d}.png")
        save_image_png(os.path.join(root, rel), img)
        rows.append(ManifestRow(rel, split, "normal", rule.name, seed, caption))

    for i in range(config.n_train):
        emit_normal("train", "train", b + i, config.jitter_train)
    off = 100_000
    for i in range(config.n_reference):
        emit_normal("reference", "reference", b + off + i, False)
    off = 200_000
    for i in range(config.n_test_normal):
        emit_normal("test_normal", "test_normal", b + off + i, False)
    off = 300_000
    idx = 0
    for kind in config.anomaly_kinds:
        for i in range(config.n_test_anomaly_per_kind):
            seed = b + off + idx
            idx += 1
            spec, gt = sample_oracle_anomaly(rule, kind, seed)
            img, _, caption = render_scene(spec, rule, seed=seed, jitter=False)
            rel = os.path.join("test_anomaly", f"{kind}_{seed:06d}.png")
            mrel = os.path.join("gt_masks", f"{kind}_{seed:06d}.png")
            save_image_png(os.path.join(root, rel), img)
            save_mask_png(os.path.join(root, mrel), gt)
            rows.append(
                ManifestRow(rel, "test_anomaly", kind, rule.name, seed, caption, mrel)
            )

    manifest = DatasetManifest(root=os.path.abspath(root), rows=rows)
    manifest.save(os.path.join(root, "manifest.jsonl"))
    return manifest
