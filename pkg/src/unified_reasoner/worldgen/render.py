"""Flat-shaded rasteriser for the synthetic scenes.

Objects are drawn back to front by size rank, so a larger object always
covers a smaller one where they overlap. Alongside the RGB image the
renderer returns an id map (index of the object owning each pixel, -1 for
background) which the dataset code uses for visibility annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

SHAPES = ("circle", "square", "triangle", "cone", "snitch")
CIRCLE, SQUARE, TRIANGLE, CONE, SNITCH = range(5)

PALETTE = (
    (0.86, 0.20, 0.18),  # red
    (0.20, 0.70, 0.25),  # green
    (0.20, 0.35, 0.90),  # blue
    (0.62, 0.25, 0.80),  # purple
    (0.15, 0.80, 0.80),  # cyan
    (0.92, 0.92, 0.92),  # white
)
SNITCH_COLOR = (1.0, 0.80, 0.0)


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 32
    background: Tuple[float, float, float] = (0.30, 0.30, 0.30)
    palette: Tuple[Tuple[float, float, float], ...] = PALETTE
    # half-extent in pixels per size rank (small, medium, large), at 32 px
    size_table: Tuple[float, ...] = (2.6, 3.4, 4.6)

    def half_extent(self, size_rank: int) -> float:
        return self.size_table[size_rank] * self.image_size / 32.0


@dataclass
class SceneObject:
    id: int
    shape: int
    size: int
    color: int
    pos: Tuple[float, float]  # (y, x) in [0, 1]
    contained_by: Optional[int] = None

    def rgb(self, cfg: RenderConfig) -> Tuple[float, float, float]:
        return SNITCH_COLOR if self.shape == SNITCH else cfg.palette[self.color % len(cfg.palette)]


def shape_mask(shape: int, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Boolean coverage of pixel centres for one shape."""
    out = np.zeros((size, size), dtype=bool)
    # every shape lies inside |dy|, |dx| <= r, so only that window is evaluated
    y0, y1 = max(int(np.floor(cy - r)) - 1, 0), min(int(np.ceil(cy + r)) + 1, size)
    x0, x1 = max(int(np.floor(cx - r)) - 1, 0), min(int(np.ceil(cx + r)) + 1, size)
    if y0 >= y1 or x0 >= x1:
        return out
    dy = (np.arange(y0, y1) + 0.5)[:, None] - cy
    dx = (np.arange(x0, x1) + 0.5)[None, :] - cx
    out[y0:y1, x0:x1] = _shape_window(shape, dy, dx, r)
    return out


def _shape_window(shape: int, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if shape == CIRCLE:
        return dy * dy + dx * dx <= r * r
    if shape == SQUARE:
        s = 0.85 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == TRIANGLE:
        frac = (dy + r) / (2 * r)
        return (np.abs(dy) <= r) & (np.abs(dx) <= frac * r)
    if shape == CONE:
        frac = (dy + r) / (2 * r)
        return (np.abs(dy) <= r) & (np.abs(dx) <= r * (0.35 + 0.65 * frac))
    if shape == SNITCH:
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {shape}")


def object_mask(obj: SceneObject, cfg: RenderConfig) -> np.ndarray:
    n = cfg.image_size
    return shape_mask(obj.shape, obj.pos[0] * n, obj.pos[1] * n, cfg.half_extent(obj.size), n)


def mask_box(mask: np.ndarray) -> Optional[Tuple[float, float, float, float]]:
    """Tight normalised (ymin, xmin, ymax, xmax) box around true pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (rows[0] / h, cols[0] / w, (rows[-1] + 1) / h, (cols[-1] + 1) / w)


def draw_order(objects: Sequence[SceneObject]) -> List[SceneObject]:
    return sorted(objects, key=lambda o: (o.size, o.id))


def render_frame(objects: Sequence[SceneObject], cfg: RenderConfig,
                 masks: Optional[dict] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Rasterise uncontained objects. Returns (uint8 image (3, H, W), id map (H, W))."""
    n = cfg.image_size
    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = cfg.background
    ids = np.full((n, n), -1, dtype=np.int32)
    for obj in draw_order(objects):
        if obj.contained_by is not None:
            continue
        m = masks[obj.id] if masks is not None else object_mask(obj, cfg)
        img[m] = obj.rgb(cfg)
        ids[m] = obj.id
    return to_uint8(img).transpose(2, 0, 1).copy(), ids


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def frames_to_float(frames: np.ndarray) -> np.ndarray:
    """uint8 frames -> float32 in [0, 1]."""
    return frames.astype(np.float32) * np.float32(1.0 / 255.0)


def write_png(path, image_chw: np.ndarray, scale: int = 4) -> None:
    from PIL import Image

    img = np.asarray(image_chw).transpose(1, 2, 0)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray(img.astype(np.uint8)).save(path)
