import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mipcad.ct_ingest import CtVolume
from mipcad.errors import ContractError
from mipcad.fpr3d import (
    FprModel,
    PatchClassifier,
    TrainConfig3D,
    archi2,
    archi3,
    augment_3d,
    binary_cross_entropy,
    ensemble_score,
    extract_patch,
    fuse_probabilities,
    layer_census,
    rotate_patch,
    score_candidates,
    train_fpr,
)
from mipcad.merge import Candidate
from mipcad.synthetic import sphere_patch, tube_patch


def _volume(rng, shape=(40, 50, 60)):
    return CtVolume(rng.random(shape).astype(np.float32), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "s")


def _cand(x, y, z, side=8.0):
    return Candidate("s", (float(x), float(y), float(z)), (float(x), float(y), float(z)), side, frozenset({1}))


# -- patches ------------------------------------------------------------------


@pytest.mark.parametrize("side", [16, 32])
def test_patch_inside_equals_slicing(side, rng):
    vol = _volume(rng)
    p = extract_patch(vol, _cand(30, 25, 20), side)
    h = side // 2
    np.testing.assert_array_equal(p.voxels, vol.voxels[20 - h : 20 + h, 25 - h : 25 + h, 30 - h : 30 + h])
    assert p.center == (30, 25, 20) and p.side_px == side
    np.testing.assert_array_equal(p.voxels, extract_patch(vol, _cand(30, 25, 20), side).voxels)


def test_patch_corner_is_one_octant(rng):
    vol = _volume(rng)
    p = extract_patch(vol, _cand(0, 0, 0), 16).voxels
    np.testing.assert_array_equal(p[8:, 8:, 8:], vol.voxels[:8, :8, :8])
    mask = np.zeros_like(p, bool)
    mask[8:, 8:, 8:] = True
    assert not p[~mask].any()


def test_patch_contract(rng):
    vol = _volume(rng)
    with pytest.raises(ContractError):
        extract_patch(vol, _cand(60, 0, 0), 16)
    with pytest.raises(ContractError):
        extract_patch(vol, _cand(5, 5, 5), 24)


def test_rotation_group_order(rng):
    x = rng.random((8, 8, 8))
    np.testing.assert_array_equal(rotate_patch(x), x)
    y = x
    for _ in range(4):
        y = rotate_patch(y, (1, 0, 0))
    np.testing.assert_array_equal(y, x)
    assert not np.array_equal(rotate_patch(x, (1, 0, 0)), x)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_preserves_multiset_and_label(seed):
    r = np.random.default_rng(seed)
    x = r.random((6, 6, 6))
    y, label = augment_3d(x, 1, r)
    assert label == 1 and y.shape == x.shape
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))


# -- architectures ------------------------------------------------------------


def test_layer_census():
    c3 = layer_census(PatchClassifier(archi3()))
    assert (c3["conv"], c3["pool"], c3["norm"], c3["total"]) == (6, 3, 3, 12)
    c2 = layer_census(PatchClassifier(archi2()))
    assert (c2["conv"], c2["pool"], c2["norm"], c2["total"]) == (9, 4, 4, 17)
    assert c2["max_width"] == 128 and c3["max_width"] == 64


@pytest.mark.parametrize("spec", [archi2(4, 8), archi3(4, 8)])
def test_output_is_probability(spec):
    net = PatchClassifier(spec).eval()
    with torch.no_grad():
        p = net.predict_proba(torch.rand(3, 1, *(spec.input_side,) * 3))
    assert p.shape == (3,) and float(p.min()) >= 0 and float(p.max()) <= 1


# -- ensemble -----------------------------------------------------------------


def test_fusion_weights():
    assert fuse_probabilities(0.9, 0.3, 10) == pytest.approx(0.5)
    assert fuse_probabilities(0.9, 0.3, 20) == pytest.approx(0.7)
    assert fuse_probabilities(0.9, 0.3, 16) == pytest.approx(0.7)  # routing is strictly below 16
    assert fuse_probabilities(0.42, 0.42, 7) == pytest.approx(0.42)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1, 60))
def test_fusion_is_convex(p2, p3, side):
    s = fuse_probabilities(p2, p3, side)
    assert min(p2, p3) - 1e-12 <= s <= max(p2, p3) + 1e-12


def test_ensemble_needs_both_models(rng):
    vol = _volume(rng)
    m3 = FprModel(PatchClassifier(archi3(4, 8)).eval())
    with pytest.raises(ContractError):
        ensemble_score(_cand(30, 25, 20), {"archi3": m3}, vol)
    m2 = FprModel(PatchClassifier(archi2(4, 8)).eval())
    scored = score_candidates(vol, [_cand(30, 25, 20), _cand(10, 10, 10, side=20)], {"archi2": m2, "archi3": m3})
    assert all(0 <= c.probability <= 1 for c in scored)
    assert scored[0].probability == pytest.approx(ensemble_score(_cand(30, 25, 20), {"archi2": m2, "archi3": m3}, vol))
    assert score_candidates(vol, [], {"archi2": m2, "archi3": m3}) == []


# -- loss and training --------------------------------------------------------


def test_bce_ln2():
    assert binary_cross_entropy([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), rel=1e-12)
    t = binary_cross_entropy(torch.tensor([0.5, 0.5], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64))
    assert float(t) == pytest.approx(math.log(2), rel=1e-12)


def test_bce_gradient_finite_differences(rng):
    h = 1e-6
    for _ in range(20):
        p = rng.uniform(0.05, 0.95, 10)
        y = (rng.random(10) > 0.5).astype(float)
        pt = torch.tensor(p, requires_grad=True)
        binary_cross_entropy(pt, torch.tensor(y)).backward()
        num = np.empty_like(p)
        for i in range(len(p)):
            a, b = p.copy(), p.copy()
            a[i] += h
            b[i] -= h
            num[i] = (binary_cross_entropy(a, y) - binary_cross_entropy(b, y)) / (2 * h)
        assert np.linalg.norm(pt.grad.numpy() - num) / np.linalg.norm(num) < 1e-3


def test_single_class_rejected():
    with pytest.raises(ContractError):
        train_fpr(np.zeros((4, 16, 16, 16)), np.ones(4), "archi3")
    with pytest.raises(ContractError):
        train_fpr(np.zeros((4, 16, 16, 16)), [0, 1, 0], "archi3")
    with pytest.raises(ContractError):
        train_fpr(np.zeros((4, 16, 16, 16)), [0, 1, 0, 1], "archi2")


def test_untrained_outputs_near_half(rng):
    x = np.stack([sphere_patch(rng) for _ in range(4)] + [tube_patch(rng) for _ in range(4)])
    model = train_fpr(x, [1] * 4 + [0] * 4, "archi3", TrainConfig3D(max_epochs=0, base_width=8, dense_width=32))
    p = model.predict(x)
    assert np.all(np.abs(p - 0.5) <= 0.2)


def test_round_trip(tmp_path, rng):
    x = np.stack([sphere_patch(rng) for _ in range(2)] + [tube_patch(rng) for _ in range(2)])
    model = train_fpr(x, [1, 1, 0, 0], "archi3", TrainConfig3D(max_epochs=1, base_width=4, dense_width=8))
    model.save(tmp_path / "m.bin")
    back = FprModel.load(tmp_path / "m.bin")
    assert back.spec == model.spec
    np.testing.assert_array_equal(back.predict(x), model.predict(x))


@pytest.mark.slow
def test_spheres_vs_tubes_overfit():
    rng = np.random.default_rng(7)
    x = np.stack([sphere_patch(rng) for _ in range(50)] + [tube_patch(rng) for _ in range(750)])
    y = np.array([1] * 50 + [0] * 750)
    cfg = TrainConfig3D(lr=1e-3, max_epochs=6, base_width=8, dense_width=32, early_stop_patience=100)
    model = train_fpr(x, y, "archi3", cfg)
    p = model.predict(x)
    assert ((p >= 0.5) == y).mean() >= 0.95
    # quarter-turn rotations of sphere patches barely move the prediction
    spheres = x[:50]
    turned = np.stack([rotate_patch(s, tuple(rng.integers(0, 4, 3))) for s in spheres])
    assert np.abs(model.predict(turned) - p[:50]).max() <= 0.05
