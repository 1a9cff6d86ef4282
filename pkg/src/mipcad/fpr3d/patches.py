"""Cubic patch extraction and right-angle rotation augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ct_ingest import CtVolume
from ..errors import ContractError

PATCH_SIDES = (16, 32)


@dataclass
class Patch3D:
    voxels: np.ndarray  # (z, y, x), cubic
    center: tuple[int, int, int]  # (x, y, z) voxel index
    side_px: int


def extract_patch(volume: CtVolume, candidate, side: int) -> Patch3D:
    """Cube of ``side`` voxels around the rounded candidate center, zero padded."""
    if side not in PATCH_SIDES:
        raise ContractError(f"patch side must be one of {PATCH_SIDES}, got {side}")
    center = candidate.rounded_voxel() if hasattr(candidate, "rounded_voxel") else tuple(
        int(np.floor(c + 0.5)) for c in candidate
    )
    shape_xyz = volume.shape_xyz
    if any(not 0 <= c < n for c, n in zip(center, shape_xyz)):
        raise ContractError(f"candidate center {center} outside volume {shape_xyz}")
    cube = np.zeros((side, side, side), dtype=volume.voxels.dtype)
    src, dst = [], []
    # array axes are (z, y, x); center is (x, y, z)
    for c, n in zip(center[::-1], volume.voxels.shape):
        lo = c - side // 2
        a, b = max(lo, 0), min(lo + side, n)
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    cube[tuple(dst)] = volume.voxels[tuple(src)]
    return Patch3D(cube, center, side)


_AXIS_PLANES = ((1, 2), (0, 2), (0, 1))  # about z, about y, about x


def rotate_patch(patch: np.ndarray, turns=(0, 0, 0)) -> np.ndarray:
    """Quarter turns about the z, y and x axes, applied in that order."""
    out = patch
    for k, axes in zip(turns, _AXIS_PLANES):
        if k % 4:
            out = np.rot90(out, k % 4, axes=axes)
    return np.ascontiguousarray(out)


def augment_3d(patch: np.ndarray, label, rng: np.random.Generator):
    turns = tuple(int(t) for t in rng.integers(0, 4, size=3))
    return rotate_patch(patch, turns), label
