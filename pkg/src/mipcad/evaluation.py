"""Candidate-to-nodule matching, stage-1 counts and FROC analysis."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
CPM_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
SIZE_BINS = ((3.0, 10.0), (10.0, 20.0), (20.0, math.inf))


def size_bin_label(lo: float, hi: float) -> str:
    return f">={lo:g}mm" if math.isinf(hi) else f"{lo:g}-{hi:g}mm"


@dataclass
class MatchResult:
    """``hits`` maps nodule index to the indices of candidates that hit it."""

    hits: dict[int, list[int]]
    false_positives: list[int]
    missed: list[int]
    ignored: list[int] = field(default_factory=list)
    unknown_series: set[str] = field(default_factory=set)

    @property
    def hit_count(self) -> int:
        return len(self.hits)


def _dist(a, b) -> float:
    return math.dist(a, b)


def match_candidates(cands, anns, irrelevant=(), series_ids=None) -> MatchResult:
    """Assign each candidate to the nearest nodule whose radius contains its center.

    Candidates inside no nodule are false positives unless they fall inside
    an ``irrelevant`` finding, in which case they are ignored. With
    ``series_ids`` given, candidates from other scans are reported in
    ``unknown_series`` and left out.
    """
    cands, anns = list(cands), list(anns)
    by_series = defaultdict(list)
    for j, a in enumerate(anns):
        by_series[a.series_id].append(j)
    skip_by_series = defaultdict(list)
    for f in irrelevant:
        skip_by_series[f.series_id].append(f)
    known = set(series_ids) if series_ids is not None else None

    hits: dict[int, list[int]] = defaultdict(list)
    fps, ignored, unknown = [], [], set()
    for i, c in enumerate(cands):
        if known is not None and c.series_id not in known:
            unknown.add(c.series_id)
            continue
        best, best_d = None, math.inf
        for j in by_series.get(c.series_id, ()):
            d = _dist(c.center_world, anns[j].center_world)
            if d <= anns[j].diameter / 2.0 and d < best_d:
                best, best_d = j, d
        if best is not None:
            hits[best].append(i)
        elif any(_dist(c.center_world, f.center_world) <= f.diameter / 2.0 for f in skip_by_series.get(c.series_id, ())):
            ignored.append(i)
        else:
            fps.append(i)
    if unknown:
        log.warning("candidates reference %d unknown series: %s", len(unknown), sorted(unknown)[:5])
    missed = [j for j in range(len(anns)) if j not in hits]
    return MatchResult(dict(hits), fps, missed, ignored, unknown)


@dataclass
class Stage1Summary:
    hits: int
    nodules: int
    false_positives: int
    scans: int
    hits_by_size: dict[str, int]
    nodules_by_size: dict[str, int]

    @property
    def sensitivity(self) -> float:
        if self.nodules == 0:
            raise ContractError("sensitivity is undefined without reference nodules")
        return self.hits / self.nodules

    @property
    def fps_per_scan(self) -> float:
        return self.false_positives / self.scans

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "nodules": self.nodules,
            "sensitivity": self.sensitivity,
            "false_positives": self.false_positives,
            "fps_per_scan": self.fps_per_scan,
            "scans": self.scans,
            "hits_by_size": self.hits_by_size,
            "nodules_by_size": self.nodules_by_size,
        }


def _size_label(d: float):
    for lo, hi in SIZE_BINS:
        if lo <= d < hi:
            return size_bin_label(lo, hi)
    return None


def stage1_metrics(cands, anns, scan_count: int, irrelevant=(), series_ids=None) -> Stage1Summary:
    anns = list(anns)
    if not anns:
        raise ContractError("sensitivity is undefined without reference nodules")
    if scan_count < 1:
        raise ContractError("scan_count must be positive")
    m = match_candidates(cands, anns, irrelevant, series_ids)
    labels = [size_bin_label(lo, hi) for lo, hi in SIZE_BINS]
    hits_by = dict.fromkeys(labels, 0)
    nods_by = dict.fromkeys(labels, 0)
    for j, a in enumerate(anns):
        lab = _size_label(a.diameter)
        if lab is None:
            continue
        nods_by[lab] += 1
        if j in m.hits:
            hits_by[lab] += 1
    return Stage1Summary(m.hit_count, len(anns), len(m.false_positives), scan_count, hits_by, nods_by)


@dataclass
class FrocResult:
    points: list[tuple[float, float]]  # (FPs/scan, sensitivity), one per threshold, descending thresholds
    thresholds: list[float]
    sensitivities: dict[float, float]
    scan_count: int
    nodule_count: int

    @property
    def cpm(self) -> float:
        return float(np.mean([self.sensitivities[p] for p in CPM_POINTS]))

    def sensitivity_at(self, fps_per_scan: float) -> float:
        return sensitivity_at(self.points, fps_per_scan)


def sensitivity_at(points, budget: float) -> float:
    """Best sensitivity over thresholds whose FPs/scan stay within ``budget``."""
    best = 0.0
    for fps, sens in points:
        if fps <= budget + 1e-12 and sens > best:
            best = sens
    return best


def froc(cands, anns, scan_count: int, irrelevant=(), series_ids=None, operating_points=OPERATING_POINTS) -> FrocResult:
    """Sweep every distinct candidate probability as a threshold (``p >= t`` kept)."""
    cands, anns = list(cands), list(anns)
    if scan_count < 1:
        raise ContractError("scan_count must be positive")
    for c in cands:
        if not 0.0 <= c.probability <= 1.0:
            raise ContractError(f"candidate probability {c.probability} outside [0, 1]")
    m = match_candidates(cands, anns, irrelevant, series_ids)
    # a nodule counts from the threshold of its best-scoring hitting candidate
    nodule_scores = np.array(sorted((max(cands[i].probability for i in idx) for idx in m.hits.values()), reverse=True))
    fp_scores = np.array(sorted((cands[i].probability for i in m.false_positives), reverse=True))
    thresholds = sorted({float(s) for s in nodule_scores} | {float(s) for s in fp_scores}, reverse=True)
    n_nod = len(anns)
    points = [(0.0, 0.0)]
    for t in thresholds:
        tp = int(np.count_nonzero(nodule_scores >= t))
        fp = int(np.count_nonzero(fp_scores >= t))
        points.append((fp / scan_count, tp / n_nod if n_nod else 0.0))
    sens = {float(p): sensitivity_at(points, p) for p in operating_points}
    return FrocResult(points, [math.inf] + thresholds, sens, scan_count, n_nod)
