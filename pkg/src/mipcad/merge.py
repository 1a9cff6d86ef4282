"""Turning probability maps into a fused candidate list."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from . import _kernels
from .errors import ContractError, FormatError

DISTANCE_RATIO = 1.1
MAP_THRESHOLD = 0.5
MAX_ASPECT = 4.0
MIN_AREA = 4
MAX_SIDE_MM = 40.0  # nodules are under 30 mm; larger blobs are vessels or lung wall
FUSE_COVER = 0.75  # cross-stream merge needs centers within this fraction of the smaller box


@dataclass(frozen=True)
class Candidate:
    series_id: str
    center_voxel: tuple[float, float, float]
    center_world: tuple[float, float, float]
    bbox_side: float
    source_thicknesses: frozenset = field(default_factory=frozenset)
    probability: float = 1.0
    bbox_mm: float | None = None

    def __post_init__(self):
        if not self.bbox_side > 0:
            raise ContractError(f"bbox_side must be positive, got {self.bbox_side}")

    @property
    def sort_key(self):
        x, y, z = self.center_voxel
        return (self.series_id, z, x, y, -self.bbox_side)

    @property
    def slice_index(self) -> int:
        return int(math.floor(self.center_voxel[2] + 0.5))

    def rounded_voxel(self) -> tuple[int, int, int]:
        return tuple(int(math.floor(c + 0.5)) for c in self.center_voxel)


def _world(voxel, spacing, origin):
    return tuple(float(o + v * s) for v, s, o in zip(voxel, spacing, origin))


def extract_candidates(
    maps,
    threshold: float = MAP_THRESHOLD,
    *,
    thickness: int = 1,
    series_id: str = "",
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    max_aspect: float = MAX_ASPECT,
    min_area: int = MIN_AREA,
    max_side_mm: float | None = MAX_SIDE_MM,
) -> list[Candidate]:
    """One candidate per outer contour of the thresholded maps, at its box center.

    Regions with an extreme aspect ratio, fewer than ``min_area`` box pixels
    or a box side above ``max_side_mm`` are dropped.
    """
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    out = []
    for k in range(maps.shape[0]):
        binary = maps[k] >= threshold
        if not binary.any():
            continue
        contours, _ = cv2.findContours(binary.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
        for contour in contours:
            x0, y0, w, h = cv2.boundingRect(contour)
            if w * h < min_area or max(w, h) > max_aspect * min(w, h):
                continue
            if max_side_mm is not None and max(w, h) * float(spacing[0]) > max_side_mm:
                continue
            voxel = (x0 + (w - 1) / 2.0, y0 + (h - 1) / 2.0, float(k))
            side = float(max(w, h))
            out.append(
                Candidate(
                    series_id,
                    voxel,
                    _world(voxel, spacing, origin),
                    side,
                    frozenset({int(thickness)}),
                    1.0,
                    side * float(spacing[0]),
                )
            )
    out.sort(key=lambda c: c.sort_key)
    return out


def _xy_ratio(a: Candidate, b: Candidate) -> float:
    dx = a.center_voxel[0] - b.center_voxel[0]
    dy = a.center_voxel[1] - b.center_voxel[1]
    return math.sqrt(dx * dx + dy * dy) / max(a.bbox_side, b.bbox_side)


def _absorb(keeper: Candidate, other: Candidate) -> Candidate:
    return replace(
        keeper,
        source_thicknesses=keeper.source_thicknesses | other.source_thicknesses,
        probability=max(keeper.probability, other.probability),
    )


def dedup_distance_ratio(cands, ratio: float = DISTANCE_RATIO) -> list[Candidate]:
    """Merge same-slice candidates closer than ``ratio`` times the larger box side.

    Larger boxes are visited first (ties: lower ``(z, x, y)``), so every
    absorbed candidate merges into a box at least as large as itself.
    """
    cands = list(cands)
    if len({(c.series_id, c.center_voxel[2]) for c in cands}) > 1:
        raise ContractError("dedup_distance_ratio expects candidates from a single slice")
    order = sorted(cands, key=lambda c: (-c.bbox_side, c.center_voxel[2], c.center_voxel[0], c.center_voxel[1]))
    kept: list[Candidate] = []
    for c in order:
        for i, k in enumerate(kept):
            if _xy_ratio(k, c) <= ratio:
                kept[i] = _absorb(k, c)
                break
        else:
            kept.append(c)
    kept.sort(key=lambda c: c.sort_key)
    return kept


def dedup_per_slice(cands, ratio: float = DISTANCE_RATIO) -> list[Candidate]:
    groups = defaultdict(list)
    for c in cands:
        groups[(c.series_id, c.center_voxel[2])].append(c)
    out = []
    for key in sorted(groups):
        out.extend(dedup_distance_ratio(groups[key], ratio))
    out.sort(key=lambda c: c.sort_key)
    return out


def _lower_median(values) -> float:
    values = sorted(values)
    return values[(len(values) - 1) // 2]


def _median_member(group: list[Candidate]) -> Candidate:
    voxel = tuple(_lower_median(c.center_voxel[i] for c in group) for i in range(3))
    world = tuple(_lower_median(c.center_world[i] for c in group) for i in range(3))
    side = max(c.bbox_side for c in group)
    mm = [c.bbox_mm for c in group if c.bbox_mm is not None]
    return Candidate(
        group[0].series_id,
        voxel,
        world,
        side,
        frozenset().union(*(c.source_thicknesses for c in group)),
        max(c.probability for c in group),
        max(mm) if mm else None,
    )


def _group(cands: list[Candidate], ratio: float, represent) -> list[Candidate]:
    by_series = defaultdict(list)
    for c in cands:
        by_series[c.series_id].append(c)
    out = []
    for sid in sorted(by_series):
        members = sorted(by_series[sid], key=lambda c: c.sort_key)
        xyz = np.array([c.center_voxel for c in members], dtype=np.float64).reshape(-1, 3)
        side = np.array([c.bbox_side for c in members], dtype=np.float64)
        ztol = np.array([max(c.source_thicknesses, default=1) for c in members], dtype=np.float64)
        labels = _kernels.group_by_proximity(xyz, side, ztol, ratio)
        groups = defaultdict(list)
        for lab, c in zip(labels, members):
            groups[int(lab)].append(c)
        out.extend(represent(g) for g in groups.values())
    out.sort(key=lambda c: c.sort_key)
    return out


def link_across_slices(cands, ratio: float = DISTANCE_RATIO) -> list[Candidate]:
    """Join detections of one finding on neighbouring slices.

    Two candidates link when they pass the in-plane distance-ratio rule and
    their slices differ by at most the slab thickness; linking is
    transitive. Each group collapses to its coordinate-wise lower median.
    """
    return _group(list(cands), ratio, _median_member)


def _size_mm(c: Candidate) -> float:
    return c.bbox_mm if c.bbox_mm is not None else c.bbox_side


def _matches(a: Candidate, b: Candidate, ratio: float, cover: float) -> bool:
    dz = abs(a.center_voxel[2] - b.center_voxel[2])
    ztol = max(max(a.source_thicknesses, default=1), max(b.source_thicknesses, default=1))
    if dz > ztol or _xy_ratio(a, b) > ratio:
        return False
    return math.dist(a.center_world, b.center_world) <= cover * min(_size_mm(a), _size_mm(b))


def fuse_streams(per_stream, ratio: float = DISTANCE_RATIO, cover: float = FUSE_COVER) -> list[Candidate]:
    """Union of all streams with cross-stream grouping around seed candidates.

    Candidates are visited thinnest source slab first (larger box first
    within a slab); each joins the first seed it matches or becomes a seed
    itself. A match needs the distance-ratio rule in x/y, a z gap of at most
    the larger slab thickness, and a 3-D center distance within ``cover``
    times the smaller box size. Without the last condition a vessel box next
    to a nodule could absorb the nodule's detection from another stream.
    Seeds keep their own center, so a coarse thick-slab box cannot chain two
    distinct findings together.
    """
    union = [c for stream in per_stream for c in stream]
    order = sorted(union, key=lambda c: (min(c.source_thicknesses, default=1), -c.bbox_side, c.sort_key))
    seeds: dict[str, list[Candidate]] = defaultdict(list)
    for c in order:
        group = seeds[c.series_id]
        for i, s in enumerate(group):
            if _matches(s, c, ratio, cover):
                group[i] = _absorb(s, c)
                break
        else:
            group.append(c)
    out = [c for group in seeds.values() for c in group]
    out.sort(key=lambda c: c.sort_key)
    return out


def stream_candidates(
    maps, stack, threshold: float = MAP_THRESHOLD, ratio: float = DISTANCE_RATIO, max_side_mm: float | None = MAX_SIDE_MM
) -> list[Candidate]:
    """Extract, dedup and z-link the candidates of one stream's maps."""
    raw = extract_candidates(
        maps,
        threshold,
        thickness=stack.slab_thickness,
        series_id=stack.series_id,
        spacing=stack.spacing,
        origin=stack.origin,
        max_side_mm=max_side_mm,
    )
    return link_across_slices(dedup_per_slice(raw, ratio), ratio)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

CANDIDATE_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "bbox_mm", "probability")
_EXTRA_COLUMNS = ("voxelX", "voxelY", "voxelZ", "bbox_px", "sources")


def write_candidates(cands, path, extended: bool = True) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANDIDATE_COLUMNS + (_EXTRA_COLUMNS if extended else ()))
        for c in cands:
            row = [
                c.series_id,
                *(repr(float(v)) for v in c.center_world),
                "" if c.bbox_mm is None else repr(float(c.bbox_mm)),
                repr(float(c.probability)),
            ]
            if extended:
                row += [*(repr(float(v)) for v in c.center_voxel), repr(float(c.bbox_side))]
                row.append(" ".join(str(t) for t in sorted(c.source_thicknesses)))
            writer.writerow(row)
    return path


def read_candidates(path) -> list[Candidate]:
    """Read a candidate CSV; ``bbox_mm`` and the extended columns are optional."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        missing = {"seriesuid", "coordX", "coordY", "coordZ"} - cols
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                world = (float(row["coordX"]), float(row["coordY"]), float(row["coordZ"]))
                bbox_mm = float(row["bbox_mm"]) if row.get("bbox_mm") else None
                prob = float(row["probability"]) if row.get("probability") else 1.0
                if row.get("voxelX"):
                    voxel = (float(row["voxelX"]), float(row["voxelY"]), float(row["voxelZ"]))
                else:
                    voxel = (math.nan, math.nan, math.nan)
                side = float(row["bbox_px"]) if row.get("bbox_px") else (bbox_mm or 1.0)
                sources = frozenset(int(t) for t in (row.get("sources") or "").split())
            except ValueError as exc:
                raise FormatError(f"{path}: bad row {row}") from exc
            out.append(Candidate(row["seriesuid"], voxel, world, side, sources, prob, bbox_mm))
    return out
