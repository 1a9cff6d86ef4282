"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results. The numpy
path is used when numba cannot be imported or when the environment
variable ``MIPCAD_DISABLE_NUMBA`` is set to a truthy value; both paths
stay importable so tests and the benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("MIPCAD_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAS_NUMBA and not _env_disabled()

# columns processed per chunk; bounds the two scratch buffers of the van Herk pass
_COLUMN_CHUNK = 1 << 16


def _lowest(dtype):
    dtype = np.dtype(dtype)
    if dtype.kind == "f":
        return dtype.type(-np.inf)
    if dtype.kind == "b":
        return False
    return np.iinfo(dtype).min


# ---------------------------------------------------------------------------
# sliding maximum along axis 0
# ---------------------------------------------------------------------------


def _sliding_max_numpy(cols: np.ndarray, window: int, before: int) -> np.ndarray:
    """van Herk / Gil-Werman running max over axis 0 of a 2-D (n, ncol) array."""
    n, ncol = cols.shape
    if window == 1:
        return cols.copy()
    length = n + window - 1
    nblocks = -(-length // window)
    padded = np.full((nblocks * window, ncol), _lowest(cols.dtype), dtype=cols.dtype)
    padded[before : before + n] = cols
    blocks = padded.reshape(nblocks, window, ncol)
    prefix = np.maximum.accumulate(blocks, axis=1).reshape(-1, ncol)
    suffix = np.maximum.accumulate(blocks[:, ::-1], axis=1)[:, ::-1].reshape(-1, ncol)
    return np.maximum(suffix[:n], prefix[window - 1 : window - 1 + n])


if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _sliding_max_numba(cols, window, before):  # pragma: no cover - compiled
        n, ncol = cols.shape
        out = np.empty_like(cols)
        if window == 1:
            out[:] = cols
            return out
        length = n + window - 1
        nblocks = (length + window - 1) // window
        total = nblocks * window
        # padding with the data minimum is neutral: every window holds a real sample
        lowest = cols[0, 0]
        for i in range(n):
            for c in range(ncol):
                if cols[i, c] < lowest:
                    lowest = cols[i, c]
        prefix = np.empty((total, ncol), dtype=cols.dtype)
        suffix = np.empty((total, ncol), dtype=cols.dtype)
        for b in range(nblocks):
            start = b * window
            for j in range(window):
                p = start + j
                src = p - before
                for c in range(ncol):
                    v = cols[src, c] if 0 <= src < n else lowest
                    if j == 0 or v > prefix[p - 1, c]:
                        prefix[p, c] = v
                    else:
                        prefix[p, c] = prefix[p - 1, c]
            for j in range(window - 1, -1, -1):
                p = start + j
                src = p - before
                for c in range(ncol):
                    v = cols[src, c] if 0 <= src < n else lowest
                    if j == window - 1 or v > suffix[p + 1, c]:
                        suffix[p, c] = v
                    else:
                        suffix[p, c] = suffix[p + 1, c]
        for k in range(n):
            e = k + window - 1
            for c in range(ncol):
                a = suffix[k, c]
                b = prefix[e, c]
                out[k, c] = a if a >= b else b
        return out

else:  # pragma: no cover
    _sliding_max_numba = None


def sliding_max_axis0(volume: np.ndarray, window: int, before: int, *, use_numba: bool | None = None) -> np.ndarray:
    """Running maximum along axis 0 with truncated (never padded) edges.

    ``out[k] = volume[max(0, k - before) : min(n, k - before + window)].max(axis=0)``
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    volume = np.asarray(volume)
    if volume.dtype.kind == "b":
        return sliding_max_axis0(volume.view(np.uint8), window, before, use_numba=use_numba).view(bool)
    shape = volume.shape
    if volume.size == 0:
        return volume.copy()
    cols = np.ascontiguousarray(volume.reshape(shape[0], -1))
    out = np.empty_like(cols)
    kernel = _sliding_max_numba if use_numba and HAS_NUMBA else _sliding_max_numpy
    for start in range(0, cols.shape[1], _COLUMN_CHUNK):
        chunk = np.ascontiguousarray(cols[:, start : start + _COLUMN_CHUNK])
        out[:, start : start + _COLUMN_CHUNK] = kernel(chunk, window, before)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# proximity grouping of candidate boxes
# ---------------------------------------------------------------------------


def _canonical(labels: np.ndarray) -> np.ndarray:
    # renumber components by first appearance so both paths agree
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[np.unique(labels, return_inverse=True)[1]]


def _group_numpy(xyz, side, ztol, ratio):
    n = xyz.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    dx = xyz[:, None, 0] - xyz[None, :, 0]
    dy = xyz[:, None, 1] - xyz[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    larger = np.maximum(side[:, None], side[None, :])
    dz = np.abs(xyz[:, None, 2] - xyz[None, :, 2])
    linked = (dist / larger <= ratio) & (dz <= np.maximum(ztol[:, None], ztol[None, :]))
    i, j = np.nonzero(linked)
    graph = coo_matrix((np.ones(i.size, dtype=np.int8), (i, j)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return _canonical(labels)


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _find(parent, i):  # pragma: no cover - compiled
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    @numba.njit(cache=True)
    def _group_numba_raw(xyz, side, ztol, ratio):  # pragma: no cover - compiled
        n = xyz.shape[0]
        parent = np.arange(n)
        for i in range(n):
            for j in range(i + 1, n):
                dx = xyz[i, 0] - xyz[j, 0]
                dy = xyz[i, 1] - xyz[j, 1]
                dist = np.sqrt(dx * dx + dy * dy)
                larger = side[i] if side[i] > side[j] else side[j]
                tol = ztol[i] if ztol[i] > ztol[j] else ztol[j]
                if dist / larger <= ratio and abs(xyz[i, 2] - xyz[j, 2]) <= tol:
                    a = _find(parent, i)
                    b = _find(parent, j)
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            labels[i] = _find(parent, i)
        return labels

    def _group_numba(xyz, side, ztol, ratio):
        if xyz.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return _canonical(_group_numba_raw(xyz, side, ztol, float(ratio)))

else:  # pragma: no cover
    _group_numba = None


def group_by_proximity(xyz, side, ztol, ratio: float, *, use_numba: bool | None = None) -> np.ndarray:
    """Connected components of the "same finding" relation between boxes.

    Two boxes are linked when their in-plane center distance divided by the
    larger box side is at most ``ratio`` and their z distance is at most the
    larger of the two z tolerances. Labels are numbered by first appearance.
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    xyz = np.ascontiguousarray(xyz, dtype=np.float64).reshape(-1, 3)
    side = np.ascontiguousarray(side, dtype=np.float64).reshape(-1)
    ztol = np.ascontiguousarray(ztol, dtype=np.float64).reshape(-1)
    if use_numba and HAS_NUMBA:
        return _group_numba(xyz, side, ztol, ratio)
    return _group_numpy(xyz, side, ztol, ratio)
