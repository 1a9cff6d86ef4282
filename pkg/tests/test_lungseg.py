import numpy as np
import pytest
from scipy import ndimage

from mipcad.ct_ingest import CtVolume
from mipcad.errors import ContractError, SegmentationError
from mipcad.lungseg import LungMask, apply_mask, clear_border_2d, disk, largest_components, segment_lungs


def phantom(hole=False):
    """Bright body disk (0.8) holding two dark ellipsoids (0.05) on dark background."""
    nz, n = 24, 64
    z, y, x = np.meshgrid(np.arange(nz), np.arange(n), np.arange(n), indexing="ij")
    vol = np.zeros((nz, n, n), dtype=np.float32)
    body = (x - 32) ** 2 / 28**2 + (y - 32) ** 2 / 24**2 <= 1
    vol[body] = 0.8
    lungs = np.zeros_like(body)
    for cx in (20, 44):
        lungs |= (x - cx) ** 2 / 8**2 + (y - 32) ** 2 / 14**2 + (z - 12) ** 2 / 10**2 <= 1
    vol[lungs] = 0.05
    if hole:
        # a small bright vessel cross-section inside the left lung, 3 voxels long in x
        vol[12, 32, 19:22] = 0.8
    return CtVolume(vol, (1, 1, 1), series_id="phantom"), lungs, body


def test_phantom_coverage():
    vol, lungs, body = phantom()
    m = segment_lungs(vol)
    assert isinstance(m, LungMask)
    assert m.mask.shape == vol.voxels.shape
    coverage = m.mask[lungs].mean()
    assert coverage >= 0.95
    assert not m.mask[~body].any()
    assert m.volume_fraction == pytest.approx(m.mask.mean())


def test_vessel_hole_is_filled():
    vol, lungs, _ = phantom(hole=True)
    m = segment_lungs(vol)
    assert m.mask[12, 32, 19:22].all()
    # no enclosed holes in any axial slice
    for k in range(m.mask.shape[0]):
        np.testing.assert_array_equal(ndimage.binary_fill_holes(m.mask[k]), m.mask[k])


def test_constant_volume_fails_with_diagnostics():
    vol = CtVolume(np.full((4, 16, 16), 0.3, dtype=np.float32), (1, 1, 1))
    with pytest.raises(SegmentationError) as info:
        segment_lungs(vol)
    assert isinstance(info.value.diagnostics, dict)


def test_deterministic():
    vol, _, _ = phantom()
    np.testing.assert_array_equal(segment_lungs(vol).mask, segment_lungs(vol).mask)


def test_mask_superset_of_two_components():
    vol, _, _ = phantom()
    dark = vol.voxels < vol.voxels.mean()
    cleared = clear_border_2d(dark)
    two, _ = largest_components(cleared, 2)
    assert not (two & ~segment_lungs(vol).mask).any()


def test_clear_border_and_disk():
    a = np.zeros((1, 6, 6), dtype=bool)
    a[0, 0, 0:2] = True
    a[0, 2:4, 2:4] = True
    out = clear_border_2d(a)[0]
    assert not out[0].any() and out[2:4, 2:4].all()
    d = disk(1)
    assert d.shape == (3, 3) and d.sum() == 5


def test_apply_mask_examples():
    vol, _, _ = phantom()
    full = LungMask(np.ones(vol.voxels.shape, bool), 1.0)
    np.testing.assert_array_equal(apply_mask(vol, full).voxels, vol.voxels)
    empty = LungMask(np.zeros(vol.voxels.shape, bool), 0.0)
    assert not apply_mask(vol, empty).voxels.any()
    m = segment_lungs(vol)
    out = apply_mask(vol, m).voxels
    np.testing.assert_array_equal(out[m.mask], vol.voxels[m.mask])
    assert not out[~m.mask].any()


def test_apply_mask_shape_mismatch():
    vol, _, _ = phantom()
    with pytest.raises(ContractError):
        apply_mask(vol, LungMask(np.ones((2, 2, 2), bool), 1.0))
