import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mipcad.ct_ingest import (
    CtVolume,
    NoduleAnnotation,
    load_annotations,
    load_array,
    load_volume,
    load_volume_cache,
    normalize_hu,
    read_mhd_header,
    resample_z,
    resampled_slice_count,
    save_annotations,
    save_array,
    save_volume,
    save_volume_cache,
    voxel_to_world,
    world_to_voxel,
)
from mipcad.errors import FormatError, GeometryError, IntegrityError


def _vol(nz=4, ny=8, nx=8, spacing=(0.7, 0.7, 2.5), dtype=np.int16, seed=0):
    rng = np.random.default_rng(seed)
    vox = rng.integers(-1024, 3000, size=(nz, ny, nx)).astype(dtype)
    return CtVolume(vox, spacing, (-200.0, -180.0, -90.0), "s1")


def test_mhd_round_trip(tmp_path):
    vol = _vol()
    path = save_volume(vol, tmp_path / "s1.mhd")
    back = load_volume(path)
    assert back.voxels.dtype == np.int16
    np.testing.assert_array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing
    assert back.origin == vol.origin
    assert back.series_id == "s1"


def test_header_passthrough(tmp_path):
    # header only describes the geometry; raw of the right size is enough
    hdr = tmp_path / "big.mhd"
    hdr.write_text(
        "ObjectType = Image\nNDims = 3\nDimSize = 512 512 133\nElementSpacing = 0.78 0.78 2.5\n"
        "Offset = 0 0 0\nElementType = MET_SHORT\nElementDataFile = big.raw\n"
    )
    (tmp_path / "big.raw").write_bytes(bytes(512 * 512 * 133 * 2))
    vol = load_volume(hdr)
    assert vol.shape_xyz == (512, 512, 133)
    assert vol.spacing == (0.78, 0.78, 2.5)


def test_short_raw_is_integrity_error(tmp_path):
    path = save_volume(_vol(), tmp_path / "s1.mhd")
    raw = tmp_path / "s1.raw"
    raw.write_bytes(raw.read_bytes()[:-10])
    with pytest.raises(IntegrityError):
        load_volume(path)


def test_missing_header_fields(tmp_path):
    p = tmp_path / "bad.mhd"
    p.write_text("NDims = 3\nElementType = MET_SHORT\n")
    with pytest.raises(FormatError):
        load_volume(p)
    with pytest.raises(FormatError):
        read_mhd_header(tmp_path / "nope.mhd")


@pytest.mark.parametrize("hu,expected", [(-1000, 0.0), (400, 1.0), (-300, 0.5), (-2000, 0.0), (3000, 1.0)])
def test_normalize_examples(hu, expected):
    vol = CtVolume(np.full((2, 2, 2), hu, dtype=np.int16), (1, 1, 1))
    out = normalize_hu(vol)
    assert out.voxels.dtype == np.float32
    np.testing.assert_allclose(out.voxels, expected, atol=1e-7)


@given(st.lists(st.integers(-3000, 3000), min_size=2, max_size=50))
def test_normalize_monotone_and_bounded(values):
    values = np.sort(np.array(values, dtype=np.int16))
    out = normalize_hu(CtVolume(values.reshape(-1, 1, 1), (1, 1, 1))).voxels.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("n,sz,expected", [(133, 2.5, 333), (100, 1.0, 100), (10, 1.25, 13), (3, 2.0, 6)])
def test_resampled_slice_count(n, sz, expected):
    assert resampled_slice_count(n, sz) == expected


def test_resample_ramp_matches_analytic():
    sz = 2.5
    z = np.arange(133) * sz
    vox = np.broadcast_to(z[:, None, None], (133, 3, 2)).astype(np.float64).copy()
    out = resample_z(CtVolume(vox, (0.7, 0.7, sz)))
    assert out.voxels.shape == (333, 3, 2)
    assert out.spacing == (0.7, 0.7, 1.0)
    want = np.minimum(np.arange(333, dtype=np.float64), z[-1])  # beyond the last slice clamps
    np.testing.assert_allclose(out.voxels[:, 1, 1], want, atol=1e-6)
    # independent 1-D interpolation oracle
    np.testing.assert_allclose(out.voxels[:, 0, 0], np.interp(np.arange(333), z, z), atol=1e-6)


def test_resample_identity_at_1mm():
    vol = _vol(spacing=(0.7, 0.7, 1.0))
    out = resample_z(vol)
    np.testing.assert_array_equal(out.voxels, vol.voxels)
    assert out.voxels.dtype == vol.voxels.dtype


def test_resample_no_overshoot(rng):
    vox = rng.normal(size=(9, 4, 4))
    out = resample_z(CtVolume(vox, (1, 1, 2.0))).voxels
    assert out.min() >= vox.min() - 1e-12 and out.max() <= vox.max() + 1e-12


def test_resample_errors():
    with pytest.raises(GeometryError):
        resample_z(CtVolume(np.zeros((1, 4, 4)), (1, 1, 2.0)))
    with pytest.raises(GeometryError):
        resample_z(CtVolume(np.zeros((5, 4, 4)), (1, 1, 3.0)))


def test_world_to_voxel_example():
    vol = CtVolume(np.zeros((4, 4, 4)), (0.7, 0.7, 1.0), (-200, -200, -100))
    np.testing.assert_allclose(world_to_voxel(vol, (-199.3, -200, -99)), (1, 0, 1), atol=1e-9)
    np.testing.assert_allclose(world_to_voxel(vol, vol.origin), (0, 0, 0))


@given(
    st.tuples(*[st.floats(-500, 500) for _ in range(3)]),
    st.tuples(*[st.floats(0.1, 5) for _ in range(3)]),
    st.tuples(*[st.floats(-400, 400) for _ in range(3)]),
)
def test_world_voxel_inverse(point, spacing, origin):
    vol = CtVolume(np.zeros((1, 1, 1)), spacing, origin)
    np.testing.assert_allclose(voxel_to_world(vol, world_to_voxel(vol, point)), point, atol=1e-9)
    np.testing.assert_allclose(world_to_voxel(vol, voxel_to_world(vol, point)), point, atol=1e-9)


def test_annotations_round_trip_and_filter(tmp_path, caplog):
    anns = [NoduleAnnotation("a", (1.0, 2.0, 3.0), 6.5), NoduleAnnotation("b", (0.0, 0.0, 0.0), 2.0)]
    path = save_annotations(anns, tmp_path / "ann.csv")
    back = load_annotations(path)
    assert back == anns[:1]
    assert load_annotations(path, min_diameter=0) == anns


def test_annotations_bad_header(tmp_path):
    p = tmp_path / "ann.csv"
    p.write_text("id,x\n1,2\n")
    with pytest.raises(FormatError):
        load_annotations(p)


def test_array_container(tmp_path):
    a = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    save_array(tmp_path / "a.npz", a, note="hi")
    back, meta = load_array(tmp_path / "a.npz")
    np.testing.assert_array_equal(back, a)
    assert meta["note"] == "hi"
    vol = _vol()
    save_volume_cache(vol, tmp_path / "v.npz")
    got = load_volume_cache(tmp_path / "v.npz")
    np.testing.assert_array_equal(got.voxels, vol.voxels)
    assert (got.spacing, got.origin, got.series_id) == (vol.spacing, vol.origin, vol.series_id)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.sampled_from([1.0, 1.25, 2.0, 2.5]))
def test_resample_geometry(n, sz):
    out = resample_z(CtVolume(np.zeros((n, 2, 2), dtype=np.int16), (0.5, 0.6, sz)))
    assert out.voxels.shape[0] == resampled_slice_count(n, sz)
    assert out.spacing[:2] == (0.5, 0.6)
