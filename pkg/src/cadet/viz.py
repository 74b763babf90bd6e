"""PNG grid rendering for attention maps, generated pairs, and detections."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [0,1] HxW or HxWx3 -> uint8 HxWx3."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    return (a * 255.0 + 0.5).astype(np.uint8)


def heat_rgb(m: np.ndarray) -> np.ndarray:
    """Scalar map -> blue-to-red heat image (uint8), max-normalized."""
    m = np.asarray(m, dtype=np.float64)
    peak = m.max()
    v = m / peak if peak > 0 else m
    r = np.clip(1.5 * v - 0.25, 0, 1)
    g = np.clip(1.0 - np.abs(2 * v - 1.0), 0, 1)
    b = np.clip(1.0 - 1.5 * v, 0, 1)
    return to_uint8(np.stack([r, g, b], axis=-1))


def overlay_mask(img: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Binary mask painted red over the image."""
    base = to_uint8(img).astype(np.float64)
    red = np.array([255.0, 40.0, 40.0])
    m = np.asarray(mask).astype(bool)
    base[m] = (1 - alpha) * base[m] + alpha * red
    return base.astype(np.uint8)


def make_grid(
    cells: list[np.ndarray], cols: int, pad: int = 2, scale: int = 2
) -> Image.Image:
    """Tile uint8 HxWx3 cells row-major into one image."""
    if not cells:
        raise ValueError("empty grid")
    h, w = cells[0].shape[:2]
    rows = (len(cells) + cols - 1) // cols
    canvas = np.full(
        (rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 24, dtype=np.uint8
    )
    for i, c in enumerate(cells):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        canvas[y : y + h, x : x + w] = c
    img = Image.fromarray(canvas)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    return img


def save_grid(path: str, cells: list[np.ndarray], cols: int, scale: int = 2) -> None:
    make_grid(cells, cols, scale=scale).save(path)


def attention_panel(image: np.ndarray, maps: dict[str, np.ndarray]) -> list[np.ndarray]:
    """One row: the image followed by each token's attention heat map,
    upsampled to image size."""
    H = image.shape[0]
    row = [to_uint8(image)]
    for name in sorted(maps):
        m = np.asarray(maps[name], dtype=np.float64)
        up = np.array(Image.fromarray(m).resize((H, H), Image.BILINEAR))
        row.append(heat_rgb(up))
    return row


def detection_panel(
    image: np.ndarray, heatmap: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray
) -> list[np.ndarray]:
    """One row: image / score heat map / predicted mask / ground truth."""
    return [
        to_uint8(image),
        heat_rgb(heatmap),
        overlay_mask(image, pred_mask),
        overlay_mask(image, gt_mask),
    ]
