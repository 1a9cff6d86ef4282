"""Bounding-box label maps and 2-D augmentation."""

from __future__ import annotations

import logging
import math

import numpy as np

from ..mip import MipStack

log = logging.getLogger(__name__)

FLIPS = ("none", "vertical", "horizontal", "both")
_EPS = 1e-9


def nodule_slice_range(center_z: float, diameter_mm: float, origin_z: float, spacing_z: float) -> tuple[int, int]:
    """Inclusive range of slice indices inside the nodule's z extent."""
    lo = (center_z - diameter_mm / 2.0 - origin_z) / spacing_z
    hi = (center_z + diameter_mm / 2.0 - origin_z) / spacing_z
    first, last = math.ceil(lo - _EPS), math.floor(hi + _EPS)
    if first > last:
        # thinner than the slice gap: nearest slice
        first = last = int(math.floor((center_z - origin_z) / spacing_z + 0.5))
    return first, last


def slab_output_range(first: int, last: int, thickness: int) -> tuple[int, int]:
    """Output indices whose slab shares at least one slice with ``[first, last]``."""
    return first - (thickness + 1) // 2 + 1, last + thickness // 2


def box_pixels(center: float, side: float) -> tuple[int, int]:
    """Half-open pixel range whose pixel centers lie in ``[center - side/2, center + side/2)``."""
    a = math.ceil(center - side / 2.0 - _EPS)
    b = math.ceil(center + side / 2.0 - _EPS)
    return a, max(b, a + 1)


def rasterize_labels(annotations, stack: MipStack) -> np.ndarray:
    """Binary maps, one per stack image, with a diameter-sized square per nodule."""
    n, h, w = stack.images.shape
    maps = np.zeros((n, h, w), dtype=bool)
    sx, sy, sz = stack.spacing
    ox, oy, oz = stack.origin
    for ann in annotations:
        cx, cy, cz = ann.center_world
        first, last = nodule_slice_range(cz, ann.diameter, oz, sz)
        k0, k1 = slab_output_range(first, last, stack.slab_thickness)
        x0, x1 = box_pixels((cx - ox) / sx, ann.diameter / sx)
        y0, y1 = box_pixels((cy - oy) / sy, ann.diameter / sy)
        k0, k1 = max(k0, 0), min(k1, n - 1)
        x0, x1, y0, y1 = max(x0, 0), min(x1, w), max(y0, 0), min(y1, h)
        if k0 > k1 or x0 >= x1 or y0 >= y1:
            log.warning("nodule at %s lies outside %s; skipped", ann.center_world, stack.series_id or "stack")
            continue
        maps[k0 : k1 + 1, y0:y1, x0:x1] = True
    return maps


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = a[..., src_y, src_x]
    return out


def apply_transform_2d(image, label, shift=(0, 0), rotations: int = 0, flip: str = "none"):
    """Translate (zero fill), rotate by ``rotations`` quarter turns, then flip."""
    if flip not in FLIPS:
        raise ValueError(f"flip must be one of {FLIPS}")
    out = []
    for a in (np.asarray(image), np.asarray(label)):
        a = _shift(a, int(shift[0]), int(shift[1]))
        a = np.rot90(a, rotations % 4, axes=(-2, -1))
        if flip in ("vertical", "both"):
            a = a[..., ::-1, :]
        if flip in ("horizontal", "both"):
            a = a[..., :, ::-1]
        out.append(np.ascontiguousarray(a))
    return out[0], out[1]


def augment_2d(image, label, rng: np.random.Generator, max_shift: int = 30):
    if image.shape[-1] != image.shape[-2]:
        raise ValueError("augmentation needs square images")
    shift = rng.integers(-max_shift, max_shift + 1, size=2)
    rotations = int(rng.integers(0, 4))
    flip = FLIPS[int(rng.integers(0, len(FLIPS)))]
    return apply_transform_2d(image, label, shift, rotations, flip)
