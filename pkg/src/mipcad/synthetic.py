"""Synthetic chest phantoms with implanted nodules and vessel-like tubes.

Used by the test-suite and the ``synth`` CLI command so the whole pipeline
runs without LIDC data. Spheres are the positives; tubes of similar
brightness are the distractors a detector must learn to reject.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ct_ingest import CtVolume, NoduleAnnotation, save_annotations, save_volume

log = logging.getLogger(__name__)

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -850.0
LESION_HU = 30.0


@dataclass(frozen=True)
class PhantomSpec:
    size_xy: int = 80
    extent_z_mm: float = 64.0
    spacing_xy: float = 1.0
    n_nodules: int = 6
    n_tubes: int = 8
    diameter_range: tuple[float, float] = (4.0, 12.0)
    tube_radius_range: tuple[float, float] = (1.0, 2.0)
    noise_hu: float = 20.0


def _lungs(spec: PhantomSpec):
    """Centers and semi-axes (mm, relative to the volume corner) of the two lungs."""
    s = spec.size_xy * spec.spacing_xy
    zc = spec.extent_z_mm / 2.0
    semi = (0.17 * s, 0.31 * s, 0.62 * spec.extent_z_mm)
    return [((0.29 * s, 0.5 * s, zc), semi), ((0.71 * s, 0.5 * s, zc), semi)]


def _inside(p, center, semi, margin=0.0) -> bool:
    q = [(pi - ci) / max(si - margin, 1e-6) for pi, ci, si in zip(p, center, semi)]
    return sum(v * v for v in q) <= 1.0


def _too_close(p, d, q, dq, slab: float = 15.0) -> bool:
    """Pairs must stay apart in x/y beyond the merge reach of their boxes, or in
    z beyond the thickest slab, so distinct nodules never share a candidate."""
    dxy = float(np.hypot(p[0] - q[0], p[1] - q[1]))
    dz = abs(float(p[2] - q[2]))
    return dxy <= 1.1 * max(d, dq) + 6.0 and dz <= slab + (d + dq) / 2 + 2.0


def _grid(spec: PhantomSpec, z_spacing: float):
    nz = int(round(spec.extent_z_mm / z_spacing))
    n = spec.size_xy
    z = np.arange(nz) * z_spacing
    y = np.arange(n) * spec.spacing_xy
    x = np.arange(n) * spec.spacing_xy
    return np.meshgrid(z, y, x, indexing="ij")


def make_case(
    rng: np.random.Generator,
    series_id: str,
    spec: PhantomSpec = PhantomSpec(),
    z_spacing: float = 2.0,
    origin=(0.0, 0.0, 0.0),
) -> tuple[CtVolume, list[NoduleAnnotation], list[dict]]:
    """One phantom volume (HU, int16) with its nodule annotations and tube descriptors."""
    zz, yy, xx = _grid(spec, z_spacing)
    s = spec.size_xy * spec.spacing_xy
    hu = np.full(zz.shape, AIR_HU, dtype=np.float32)
    body = ((xx - s / 2) / (0.46 * s)) ** 2 + ((yy - s / 2) / (0.40 * s)) ** 2 <= 1.0
    hu[body] = BODY_HU
    lungs = _lungs(spec)
    lung_mask = np.zeros(zz.shape, dtype=bool)
    for (cx, cy, cz), (ax, ay, az) in lungs:
        lung_mask |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0
    hu[lung_mask] = LUNG_HU

    lesion = np.zeros(zz.shape, dtype=bool)
    tubes = []
    for _ in range(spec.n_tubes):
        center, semi = lungs[int(rng.integers(2))]
        radius = float(rng.uniform(*spec.tube_radius_range))
        p0 = np.array([rng.uniform(c - 0.7 * a, c + 0.7 * a) for c, a in zip(center, semi)])
        direction = rng.normal(size=3)
        direction[2] = abs(direction[2]) + 1.0  # mostly cranio-caudal, like vessels crossing slices
        direction /= np.linalg.norm(direction)
        length = float(rng.uniform(0.6, 1.0) * spec.extent_z_mm)
        a = p0 - direction * length / 2
        rel = np.stack([xx - a[0], yy - a[1], zz - a[2]], axis=-1)
        t = np.clip(rel @ direction, 0.0, length)
        d2 = ((rel - t[..., None] * direction) ** 2).sum(-1)
        lesion |= (d2 <= radius * radius) & lung_mask
        tubes.append({"start": a.tolist(), "direction": direction.tolist(), "length": length, "radius": radius})

    anns, centers = [], []
    lo, hi = spec.diameter_range
    attempts = 0
    while len(anns) < spec.n_nodules and attempts < 2000:
        attempts += 1
        d = float(rng.uniform(lo, hi))
        center, semi = lungs[int(rng.integers(2))]
        p = np.array([rng.uniform(c - a, c + a) for c, a in zip(center, semi)])
        if not _inside(p, center, semi, margin=d / 2 + 3.0):
            continue
        if p[2] < d / 2 + 2 or p[2] > spec.extent_z_mm - z_spacing - d / 2 - 2:
            continue
        if any(_too_close(p, d, q, dq) for q, dq in centers):
            continue
        centers.append((p, d))
        lesion |= (xx - p[0]) ** 2 + (yy - p[1]) ** 2 + (zz - p[2]) ** 2 <= (d / 2) ** 2
        world = tuple(float(v + o) for v, o in zip(p, origin))
        anns.append(NoduleAnnotation(series_id, world, d))
    if len(anns) < spec.n_nodules:
        log.warning("%s: placed %d of %d nodules", series_id, len(anns), spec.n_nodules)

    hu[lesion] = LESION_HU
    hu += rng.normal(0.0, spec.noise_hu, size=hu.shape).astype(np.float32)
    voxels = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    vol = CtVolume(voxels, (spec.spacing_xy, spec.spacing_xy, z_spacing), origin, series_id)
    return vol, anns, tubes


Z_SPACINGS = (1.0, 1.25, 2.0, 2.5)


def generate_cases(n_volumes: int = 6, seed: int = 0, spec: PhantomSpec = PhantomSpec(), prefix: str = "synth"):
    rng = np.random.default_rng(seed)
    for i in range(n_volumes):
        sid = f"{prefix}{seed:03d}.{i:03d}"
        origin = (float(rng.uniform(-200, -150)), float(rng.uniform(-200, -150)), float(rng.uniform(-350, -50)))
        z_spacing = Z_SPACINGS[i % len(Z_SPACINGS)]
        yield make_case(rng, sid, spec, z_spacing, origin)


def write_mini_dataset(root, n_volumes: int = 6, seed: int = 0, spec: PhantomSpec = PhantomSpec()) -> list[str]:
    """Write ``<root>/<series>.mhd/.raw`` plus ``annotations.csv``; return the series ids."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    all_anns, ids = [], []
    for vol, anns, _ in generate_cases(n_volumes, seed, spec):
        save_volume(vol, root / f"{vol.series_id}.mhd")
        all_anns.extend(anns)
        ids.append(vol.series_id)
    save_annotations(all_anns, root / "annotations.csv")
    return ids


# ---------------------------------------------------------------------------
# stand-alone patches
# ---------------------------------------------------------------------------


def _noise_cube(rng, side, noise):
    return np.clip(0.107 + rng.normal(0, noise, size=(side,) * 3), 0, 1).astype(np.float32)


def sphere_patch(rng: np.random.Generator, side: int = 16, diameter=None, noise: float = 0.015) -> np.ndarray:
    """Normalized-intensity cube with a bright sphere near its center."""
    d = float(diameter if diameter is not None else rng.uniform(4.0, min(12.0, side - 2)))
    cube = _noise_cube(rng, side, noise)
    c = side / 2 - 0.5 + rng.uniform(-1, 1, size=3)
    g = np.indices(cube.shape).astype(np.float64)
    r2 = sum((g[i] - c[i]) ** 2 for i in range(3))
    cube[r2 <= (d / 2) ** 2] = (LESION_HU + 1000) / 1400
    return cube


def tube_patch(rng: np.random.Generator, side: int = 16, noise: float = 0.015) -> np.ndarray:
    """Cube crossed by a bright cylinder through (or near) its center."""
    cube = _noise_cube(rng, side, noise)
    radius = rng.uniform(1.0, 2.5)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    c = side / 2 - 0.5 + rng.uniform(-1.5, 1.5, size=3)
    g = np.moveaxis(np.indices(cube.shape).astype(np.float64), 0, -1) - c
    t = g @ direction
    d2 = (g**2).sum(-1) - t**2
    cube[d2 <= radius**2] = (LESION_HU + 1000) / 1400
    return cube
