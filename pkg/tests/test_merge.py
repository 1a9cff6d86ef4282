import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mipcad import _kernels
from mipcad.errors import ContractError
from mipcad.evaluation import match_candidates
from mipcad.merge import (
    Candidate,
    dedup_distance_ratio,
    dedup_per_slice,
    extract_candidates,
    fuse_streams,
    link_across_slices,
    read_candidates,
    write_candidates,
)
from mipcad.synthetic import generate_cases


def cand(x, y, z, side=6.0, t=1, sid="s", p=1.0):
    return Candidate(sid, (float(x), float(y), float(z)), (float(x), float(y), float(z)), float(side), frozenset({t}), p)


# -- extraction -------------------------------------------------------------


def test_single_square():
    maps = np.zeros((40, 256, 256), np.float32)
    maps[30, 200:206, 100:106] = 1.0
    out = extract_candidates(maps)
    assert len(out) == 1
    c = out[0]
    assert c.center_voxel == (102.5, 202.5, 30.0)
    assert c.bbox_side == 6
    assert c.rounded_voxel() == (103, 203, 30)


def test_empty_and_two_squares():
    maps = np.zeros((3, 64, 64))
    assert extract_candidates(maps) == []
    maps[1, 5:10, 5:10] = 0.9
    maps[1, 40:48, 30:36] = 0.7
    out = extract_candidates(maps)
    assert len(out) == 2
    assert sorted(c.bbox_side for c in out) == [5, 8]


def test_regular_shape_filter():
    maps = np.zeros((1, 64, 64))
    maps[0, 10, 10:30] = 1  # 1 x 20 sliver: aspect 20
    maps[0, 40, 40] = 1  # single pixel: area 1
    maps[0, 50:52, 50:52] = 1  # 2 x 2: area 4 kept
    out = extract_candidates(maps)
    assert [c.bbox_side for c in out] == [2]
    big = np.zeros((1, 128, 128))
    big[0, 10:60, 10:60] = 1
    assert extract_candidates(big, spacing=(1.0, 1.0, 1.0)) == []  # 50 mm box
    assert len(extract_candidates(big, spacing=(0.5, 0.5, 1.0))) == 1  # 25 mm box


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_k_far_squares_give_k(k, seed):
    r = np.random.default_rng(seed)
    maps = np.zeros((1, 200, 200))
    for i in range(k):
        side = int(r.integers(3, 12))
        y0, x0 = 10 + 30 * i, 10 + int(r.integers(0, 150))
        maps[0, y0 : y0 + side, x0 : x0 + side] = 1
    assert len(extract_candidates(maps)) == k


# -- dedup --------------------------------------------------------------------


def test_ratio_examples():
    a, b = cand(0, 0, 5, side=10), cand(10, 0, 5, side=8)
    merged = dedup_distance_ratio([a, b])
    assert len(merged) == 1 and merged[0].bbox_side == 10
    c = cand(12, 0, 5, side=8)
    assert len(dedup_distance_ratio([a, c])) == 2
    assert len(dedup_distance_ratio([a, a])) == 1


def test_dedup_tie_keeps_smaller_center():
    a, b = cand(20, 0, 5, side=10, t=1), cand(10, 0, 5, side=10, t=5)
    out = dedup_distance_ratio([a, b])
    assert len(out) == 1
    assert out[0].center_voxel == (10.0, 0.0, 5.0)
    assert out[0].source_thicknesses == {1, 5}


def test_dedup_requires_single_slice():
    with pytest.raises(ContractError):
        dedup_distance_ratio([cand(0, 0, 1), cand(50, 0, 2)])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 15)), max_size=25))
def test_dedup_idempotent_and_clean(items):
    cands = [cand(x, y, 7, side=s) for x, y, s in items]
    once = dedup_distance_ratio(cands)
    assert dedup_distance_ratio(once) == once
    for a, b in itertools.combinations(once, 2):
        d = np.hypot(a.center_voxel[0] - b.center_voxel[0], a.center_voxel[1] - b.center_voxel[1])
        assert d / max(a.bbox_side, b.bbox_side) > 1.1


# -- linking ------------------------------------------------------------------


def test_link_30_to_35_median(use_numba, monkeypatch):
    monkeypatch.setattr(_kernels, "USE_NUMBA", use_numba)
    cands = [cand(100, 200, z) for z in range(30, 36)]
    out = link_across_slices(cands)
    assert len(out) == 1 and out[0].center_voxel[2] == 32


def test_link_gap_and_empty(use_numba, monkeypatch):
    monkeypatch.setattr(_kernels, "USE_NUMBA", use_numba)
    assert len(link_across_slices([cand(5, 5, 10, t=5), cand(5, 5, 40, t=5)])) == 2
    assert link_across_slices([]) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(0, 30), st.integers(2, 9)), max_size=30))
def test_grouping_paths_agree(items):
    if not _kernels.HAS_NUMBA:
        return
    xyz = np.array([i[:3] for i in items], dtype=float).reshape(-1, 3)
    side = np.array([i[3] for i in items], dtype=float)
    ztol = np.full(len(items), 5.0)
    a = _kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=True)
    b = _kernels.group_by_proximity(xyz, side, ztol, 1.1, use_numba=False)
    np.testing.assert_array_equal(a, b)


# -- fusion -------------------------------------------------------------------


def test_fuse_identical_and_distinct():
    streams = [[cand(50, 50, 20, t=t)] for t in (1, 5, 10, 15)]
    out = fuse_streams(streams)
    assert len(out) == 1 and out[0].source_thicknesses == {1, 5, 10, 15}
    far = [[cand(10 + 40 * i, 10, 20 + 30 * i, t=t)] for i, t in enumerate((1, 5, 10, 15))]
    assert len(fuse_streams(far)) == 4


def test_fuse_does_not_chain_distinct_findings():
    # two thin-slab detections 13 slices apart bridged by one thick-slab box
    streams = [[cand(30, 30, 12, side=8, t=1), cand(30, 30, 25, side=8, t=1)], [], [], [cand(30, 30, 19, side=8, t=15)]]
    out = fuse_streams(streams)
    assert sorted(c.center_voxel[2] for c in out) == [12, 25]


def test_fuse_keeps_nodule_beside_vessel():
    # a 1 mm vessel box 4.5 px from a thick-slab nodule box: ratio 0.76 but
    # the centers are not covered by the smaller box, so both survive
    vessel, nodule = cand(30, 30, 20, side=4, t=1), cand(34.5, 30, 20, side=6, t=15)
    out = fuse_streams([[vessel], [], [], [nodule]])
    assert sorted(c.center_voxel[0] for c in out) == [30, 34.5]
    close = cand(31.5, 30, 22, side=6, t=15)
    (one,) = fuse_streams([[vessel], [], [], [close]])
    assert one.center_voxel == vessel.center_voxel and one.source_thicknesses == {1, 15}


def _synthetic_streams(seed):
    """Per-stream detections of the phantom nodules plus detections on tubes.

    Each stream misses a quarter of the nodules; a detection lies within a
    quarter diameter of the nodule center (clearly a hit). Tube detections
    anywhere along the tube play the false positives.
    """
    r = np.random.default_rng(seed)
    streams = {t: [] for t in (1, 5, 10, 15)}
    anns = []
    for vol, nods, tubes in generate_cases(3, seed):
        anns += nods
        ox, oy, oz = vol.origin
        for t in streams:
            for a in nods:
                if r.random() < 0.25:
                    continue
                cx, cy, cz = a.center_world
                ang, rad = r.uniform(0, 2 * np.pi), r.uniform(0, a.diameter / 4)
                jit = rad * np.cos(ang), rad * np.sin(ang)
                z = cz + r.uniform(-0.25, 0.25) * min(t, a.diameter)
                side = a.diameter * r.uniform(1.0, 1.3)
                p = (cx + jit[0], cy + jit[1], z)
                streams[t].append(Candidate(vol.series_id, (p[0] - ox, p[1] - oy, p[2] - oz), p, side, frozenset({t})))
            for tube in tubes:
                if r.random() < 0.5:
                    s = np.asarray(tube["start"]) + np.asarray(tube["direction"]) * tube["length"] * r.random()
                    w = tuple(float(v + o) for v, o in zip(s, vol.origin))
                    streams[t].append(Candidate(vol.series_id, tuple(map(float, s)), w, float(r.uniform(3, 8)), frozenset({t})))
    return [sorted(s, key=lambda c: c.sort_key) for s in streams.values()], anns


@pytest.mark.parametrize("seed", range(8))
def test_fusion_hits_superset(seed):
    streams, anns = _synthetic_streams(seed)
    fused_hits = set(match_candidates(fuse_streams(streams), anns).hits)
    for s in streams:
        assert set(match_candidates(s, anns).hits) <= fused_hits


def test_fuse_permutation_invariant(rng):
    streams, _ = _synthetic_streams(3)
    base = fuse_streams(streams)
    for perm in itertools.permutations(range(4)):
        shuffled = [list(rng.permutation(np.array(streams[i], dtype=object))) for i in perm]
        assert fuse_streams(shuffled) == base
    keys = [c.sort_key for c in base]
    assert keys == sorted(keys)


# -- CSV ----------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    cands = [cand(1.5, 2, 3, side=7, t=5, p=0.25), cand(4, 5, 6, side=3, t=1)]
    cands = [c if c.bbox_mm else Candidate(c.series_id, c.center_voxel, c.center_world, c.bbox_side, c.source_thicknesses, c.probability, 0.7 * c.bbox_side) for c in cands]
    write_candidates(cands, tmp_path / "c.csv")
    assert read_candidates(tmp_path / "c.csv") == cands
    head = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert head.startswith("seriesuid,coordX,coordY,coordZ,bbox_mm,probability")
    write_candidates(cands, tmp_path / "plain.csv", extended=False)
    plain = read_candidates(tmp_path / "plain.csv")
    assert [c.center_world for c in plain] == [c.center_world for c in cands]


def test_csv_without_bbox_column(tmp_path):
    p = tmp_path / "luna.csv"
    p.write_text("seriesuid,coordX,coordY,coordZ,probability\na,1,2,3,0.5\n")
    (c,) = read_candidates(p)
    assert c.center_world == (1.0, 2.0, 3.0) and c.probability == 0.5 and c.bbox_mm is None


def test_dedup_per_slice_groups_by_slice():
    out = dedup_per_slice([cand(0, 0, 1), cand(1, 0, 1), cand(0, 0, 2)])
    assert [c.center_voxel[2] for c in out] == [1, 2]
