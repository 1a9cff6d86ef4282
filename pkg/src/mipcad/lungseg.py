"""Lung parenchyma masking of a normalized CT volume.

The mask keeps a generous margin around the lungs (closing, then
dilation) so nodules attached to the pleural wall stay inside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .ct_ingest import CtVolume
from .errors import ContractError, SegmentationError

_FOUR_CONNECTED = ndi.generate_binary_structure(2, 1)
_TWENTY_SIX_CONNECTED = ndi.generate_binary_structure(3, 3)


@dataclass
class LungMask:
    mask: np.ndarray
    volume_fraction: float


@dataclass(frozen=True)
class LungSegParams:
    closing_radius: int = 5
    dilation_radius: int = 3
    n_components: int = 2


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def clear_border_2d(dark: np.ndarray) -> np.ndarray:
    """Drop 4-connected regions of each axial slice that touch the slice border."""
    out = np.zeros_like(dark)
    for z, plane in enumerate(dark):
        labels, n = ndi.label(plane, structure=_FOUR_CONNECTED)
        if n == 0:
            continue
        edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
        keep = np.ones(n + 1, dtype=bool)
        keep[edge] = False
        keep[0] = False
        out[z] = keep[labels]
    return out


def largest_components(mask: np.ndarray, count: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``count`` largest 26-connected components; also return all sizes."""
    labels, n = ndi.label(mask, structure=_TWENTY_SIX_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool), np.zeros(0, dtype=np.int64)
    sizes = np.bincount(labels.ravel())[1:]
    # stable: equal sizes resolve to the lower label
    keep_labels = np.argsort(-sizes, kind="stable")[:count] + 1
    keep = np.zeros(n + 1, dtype=bool)
    keep[keep_labels] = True
    return keep[labels], sizes


def _per_slice(op, mask: np.ndarray, structure: np.ndarray) -> np.ndarray:
    pad = structure.shape[0] // 2
    out = np.empty_like(mask)
    for z, plane in enumerate(mask):
        # padding keeps closing extensive near the slice edges
        padded = np.pad(plane, pad)
        res = op(padded, structure=structure)
        out[z] = res[pad : pad + plane.shape[0], pad : pad + plane.shape[1]]
    return out


def segment_lungs(volume: CtVolume, params: LungSegParams = LungSegParams()) -> LungMask:
    voxels = volume.voxels
    threshold = float(voxels.mean())
    dark = voxels < threshold
    internal = clear_border_2d(dark)
    lungs, sizes = largest_components(internal, params.n_components)
    if not lungs.any():
        raise SegmentationError(
            f"{volume.series_id or 'volume'}: no internal air component below threshold {threshold:.4f}",
            {"threshold": threshold, "dark_fraction": float(dark.mean()), "components": int(sizes.size)},
        )
    closed = _per_slice(ndi.binary_closing, lungs, disk(params.closing_radius)) | lungs
    dilated = _per_slice(ndi.binary_dilation, closed, disk(params.dilation_radius))
    filled = np.empty_like(dilated)
    for z, plane in enumerate(dilated):
        filled[z] = ndi.binary_fill_holes(plane)
    return LungMask(filled, float(filled.mean()))


def apply_mask(volume: CtVolume, mask: LungMask) -> CtVolume:
    if mask.mask.shape != volume.voxels.shape:
        raise ContractError(f"mask shape {mask.mask.shape} != volume shape {volume.voxels.shape}")
    return volume.with_voxels(np.where(mask.mask, volume.voxels, np.zeros((), volume.voxels.dtype)))
