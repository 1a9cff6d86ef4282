"""Shared synthetic fixtures (imported by several test modules)."""

import numpy as np

from mipcad.ct_ingest import normalize_hu, resample_z
from mipcad.lungseg import apply_mask, segment_lungs
from mipcad.mip import build_mip_stack
from mipcad.synthetic import PhantomSpec, make_case

SMALL = PhantomSpec(size_xy=64, extent_z_mm=40, n_nodules=3, n_tubes=4)


def prepared_case(seed, spec=SMALL, z_spacing=1.0, sid="s"):
    """Phantom resampled, normalized and lung-masked, plus its annotations."""
    vol, anns, tubes = make_case(np.random.default_rng(seed), sid, spec, z_spacing)
    v = normalize_hu(resample_z(vol))
    return apply_mask(v, segment_lungs(v)), anns, tubes


def positive_slices(n_volumes=2, thickness=1, seed=0):
    from mipcad.detect2d import rasterize_labels

    xs, ys, stacks, all_anns = [], [], [], []
    for i in range(n_volumes):
        v, anns, _ = prepared_case(seed + i, sid=f"s{i}")
        st = build_mip_stack(v, thickness)
        y = rasterize_labels(anns, st)
        keep = y.any(axis=(1, 2))
        xs.append(st.images[keep])
        ys.append(y[keep])
        stacks.append(st)
        all_anns.append(anns)
    return np.concatenate(xs), np.concatenate(ys), stacks, all_anns
