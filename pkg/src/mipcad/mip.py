"""Sliding-slab maximum intensity projection along z."""

from __future__ import annotations

import numbers
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ct_ingest import TARGET_Z_SPACING_MM, CtVolume
from .errors import ContractError, ParameterError

DEFAULT_THICKNESSES = (1, 5, 10, 15)


@dataclass
class MipStack:
    images: np.ndarray  # (n_slices, y, x)
    slab_thickness: int
    z_centers: np.ndarray
    series_id: str = ""
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, k):
        return self.images[k]


def slab_bounds(k: int, thickness: int, n_slices: int | None = None) -> tuple[int, int]:
    """Inclusive slice range summarized by output index ``k``."""
    lo = k - thickness // 2
    hi = k + (thickness + 1) // 2 - 1
    if n_slices is not None:
        lo, hi = max(lo, 0), min(hi, n_slices - 1)
    return lo, hi


def check_thickness(thickness) -> int:
    if isinstance(thickness, bool) or not isinstance(thickness, numbers.Real):
        raise ParameterError(f"slab thickness must be an integer number of mm, got {thickness!r}")
    if float(thickness) != int(thickness) or thickness < 1:
        raise ParameterError(f"slab thickness must be an integer >= 1 mm, got {thickness!r}")
    return int(thickness)


def sliding_slab_max(voxels: np.ndarray, thickness: int, *, use_numba: bool | None = None) -> np.ndarray:
    t = check_thickness(thickness)
    return _kernels.sliding_max_axis0(voxels, t, t // 2, use_numba=use_numba)


def build_mip_stack(volume: CtVolume, thickness, *, use_numba: bool | None = None) -> MipStack:
    if abs(volume.spacing[2] - TARGET_Z_SPACING_MM) > 1e-9:
        raise ContractError(f"MIP needs a 1 mm z grid, volume has {volume.spacing[2]} mm")
    t = check_thickness(thickness)
    images = sliding_slab_max(volume.voxels, t, use_numba=use_numba)
    z_centers = volume.origin[2] + np.arange(images.shape[0]) * TARGET_Z_SPACING_MM
    return MipStack(images, t, z_centers, volume.series_id, volume.spacing, volume.origin)


def build_mip_stacks(volume: CtVolume, thicknesses=DEFAULT_THICKNESSES) -> dict[int, MipStack]:
    return {int(t): build_mip_stack(volume, t) for t in thicknesses}


def to_png(image: np.ndarray, path) -> None:
    """Write one projection image as an 8-bit grayscale PNG."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo and not (lo >= 0.0 and hi <= 1.0):
        img = (img - lo) / (hi - lo)
    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)).save(path)
