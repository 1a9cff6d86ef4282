"""Stage orchestration with content-hash keyed caching.

Every stage writes its outputs under the cache directory together with a
manifest holding the stage key: a hash of the stage parameters and the
keys of the stages it reads. Re-running a stage whose key and outputs are
unchanged is a no-op.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..ct_ingest import (
    data_file_path,
    load_annotations,
    load_array,
    load_volume,
    load_volume_cache,
    normalize_hu,
    resample_z,
    save_array,
    save_volume_cache,
    world_to_voxel,
)
from ..detect2d import DetectorModel, predict_maps, rasterize_labels, train_detector
from ..errors import DependencyError, GeometryError, MipCadError, ParameterError, SegmentationError
from ..evaluation import OPERATING_POINTS, froc, match_candidates, stage1_metrics
from ..fpr3d import FprModel, extract_patch, score_candidates, train_fpr
from ..lungseg import LungMask, apply_mask, segment_lungs
from ..merge import Candidate, fuse_streams, read_candidates, stream_candidates, write_candidates
from ..mip import MipStack, build_mip_stack
from .. import report as rep
from .config import PipelineConfig
from .folds import FoldPlan, assign_subsets, discover_subsets, make_fold_plan

log = logging.getLogger(__name__)

STAGES = ("segment", "mip", "train-detect", "detect", "merge", "train-fpr", "score", "froc", "report")
UPSTREAM = {
    "segment": (),
    "mip": ("segment",),
    "train-detect": ("mip",),
    "detect": ("train-detect", "mip"),
    "merge": ("detect",),
    "train-fpr": ("merge", "detect", "segment"),
    "score": ("train-fpr", "merge"),
    "froc": ("score",),
    "report": ("froc", "merge"),
}
SCAN_STAGES = {"segment", "mip"}


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "cached"
    key: str
    outputs: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    seconds: float = 0.0


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def _segment_one(args):
    sid, mhd, out_dir, params, max_spacing = args
    vol = load_volume(mhd, sid)
    try:
        hu = resample_z(vol, max_spacing)
    except GeometryError as exc:
        return sid, "rejected", str(exc)
    norm = normalize_hu(hu)
    try:
        mask = segment_lungs(norm, params)
    except SegmentationError as exc:
        return sid, "failed", f"{exc} {exc.diagnostics}"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume_cache(hu, out_dir / "hu.npz")
    save_volume_cache(hu.with_voxels(mask.mask), out_dir / "mask.npz", volume_fraction=mask.volume_fraction)
    return sid, "ok", f"lung fraction {mask.volume_fraction:.3f}"


def _mip_one(args):
    sid, scan_dir, thicknesses = args
    scan_dir = Path(scan_dir)
    norm = normalize_hu(load_volume_cache(scan_dir / "hu.npz"))
    mask_vol = load_volume_cache(scan_dir / "mask.npz")
    masked = apply_mask(norm, LungMask(mask_vol.voxels.astype(bool), float(mask_vol.voxels.mean())))
    outs = []
    for t in thicknesses:
        stack = build_mip_stack(masked, t)
        path = scan_dir / f"mip_t{t}.npz"
        save_array(
            path,
            stack.images,
            slab_thickness=t,
            series_id=sid,
            spacing=list(stack.spacing),
            origin=list(stack.origin),
        )
        outs.append(str(path))
    return sid, outs


def load_stack(path) -> MipStack:
    images, h = load_array(path)
    z = h["origin"][2] + np.arange(images.shape[0]) * h["spacing"][2]
    return MipStack(images, int(h["slab_thickness"]), z, h["series_id"], tuple(h["spacing"]), tuple(h["origin"]))


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.cache = Path(cfg.cache_dir)

    # -- inputs ---------------------------------------------------------------

    def scan_paths(self) -> dict[str, Path]:
        root = Path(self.cfg.data_root)
        if not root.is_dir():
            raise MipCadError(f"data root {root} does not exist")
        paths = {p.stem: p for p in sorted(root.rglob("*.mhd"))}
        if not paths:
            raise MipCadError(f"no .mhd volumes under {root}")
        return paths

    def annotations(self):
        return load_annotations(self.cfg.annotations_path)

    def subsets(self) -> list[list[str]]:
        if self.cfg.subsets is not None:
            return self.cfg.subsets
        found = discover_subsets(self.cfg.data_root)
        if found is not None:
            return found
        return assign_subsets(self.scan_paths(), self.cfg.n_subsets)

    def plan(self) -> FoldPlan:
        plan = make_fold_plan(self.subsets(), self.cfg.fold, self.cfg.seed)
        usable = set(self.usable_scans()) if self._manifest_path("segment").exists() else None
        if usable is not None:
            plan = FoldPlan(plan.fold, *(tuple(s for s in part if s in usable) for part in (plan.train, plan.val, plan.test)))
        return plan

    def usable_scans(self) -> list[str]:
        return sorted(self._manifest("segment")["info"]["ok"])

    # -- manifests ------------------------------------------------------------

    def scan_dir(self, sid: str) -> Path:
        return self.cache / "scans" / sid

    def fold_dir(self) -> Path:
        return self.cache / f"fold{self.cfg.fold}"

    def _manifest_path(self, stage: str) -> Path:
        if stage in SCAN_STAGES:
            return self.cache / "manifests" / f"{stage}.json"
        return self.fold_dir() / "manifests" / f"{stage}.json"

    def _manifest(self, stage: str) -> dict:
        return json.loads(self._manifest_path(stage).read_text())

    def _upstream_keys(self, stage: str) -> dict[str, str]:
        keys = {}
        for up in UPSTREAM[stage]:
            if not self._manifest_path(up).exists():
                raise DependencyError(stage, up)
            keys[up] = self._manifest(up)["fingerprint"]
        return keys

    def _params(self, stage: str) -> dict:
        c = self.cfg
        if stage == "segment":
            scans = self.scan_paths()
            digests = {sid: file_digest(p) + file_digest(data_file_path(p)) for sid, p in scans.items()}
            return {"scans": digests, "lungseg": asdict(c.lungseg), "max_slice_spacing": c.max_slice_spacing}
        if stage == "mip":
            return {"thicknesses": list(c.thicknesses)}
        common = {"plan": asdict(self.plan())}
        if stage == "train-detect":
            return {**common, "annotations": file_digest(c.annotations_path), "cfg": asdict(c.detect2d), "t": list(c.thicknesses)}
        if stage == "detect":
            return {**common, "threshold": c.map_threshold, "ratio": c.distance_ratio, "max_box_mm": c.max_box_mm}
        if stage == "merge":
            return {"ratio": c.distance_ratio, "cover": c.fuse_cover}
        if stage == "train-fpr":
            return {**common, "annotations": file_digest(c.annotations_path), "cfg": asdict(c.fpr3d)}
        if stage in ("score", "froc"):
            return {**common, "annotations": file_digest(c.annotations_path)}
        if stage == "report":
            return {"config": c.digest()}
        raise ParameterError(f"unknown stage {stage!r}")

    # -- driver ---------------------------------------------------------------

    def run(self, stage: str, force: bool = False) -> StageResult:
        if stage not in STAGES:
            raise ParameterError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        upstream = self._upstream_keys(stage)
        key = _hash_json({"stage": stage, "upstream": upstream, "params": self._params(stage)})
        mpath = self._manifest_path(stage)
        if not force and mpath.exists():
            m = json.loads(mpath.read_text())
            if m["key"] == key and all(Path(p).exists() for p in m["outputs"]):
                log.info("%s: cache hit (%s)", stage, key[:12])
                return StageResult(stage, "cached", key, m["outputs"], m.get("info", {}))
        t0 = time.perf_counter()
        outputs, info = getattr(self, "_stage_" + stage.replace("-", "_"))()
        seconds = time.perf_counter() - t0
        mpath.parent.mkdir(parents=True, exist_ok=True)
        # downstream keys chain on output content, so a forced rerun that
        # changes results invalidates later stages
        fingerprint = _hash_json({"key": key, "outputs": {str(p): file_digest(p) for p in outputs}})
        manifest = {
            "stage": stage,
            "key": key,
            "fingerprint": fingerprint,
            "outputs": [str(p) for p in outputs],
            "info": info,
            "seconds": seconds,
        }
        mpath.write_text(json.dumps(manifest, indent=1, default=str))
        log.info("%s: done in %.1fs", stage, seconds)
        return StageResult(stage, "ran", key, manifest["outputs"], info, seconds)

    def run_all(self, force: bool = False) -> list[StageResult]:
        return [self.run(s, force) for s in STAGES]

    def _map(self, fn, items):
        if self.cfg.workers > 1 and len(items) > 1:
            with ProcessPoolExecutor(self.cfg.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    # -- stages ---------------------------------------------------------------

    def _stage_segment(self):
        jobs = [
            (sid, str(p), str(self.scan_dir(sid)), self.cfg.lungseg, self.cfg.max_slice_spacing)
            for sid, p in self.scan_paths().items()
        ]
        info = {"ok": [], "rejected": {}, "failed": {}}
        outputs = []
        for sid, status, msg in self._map(_segment_one, jobs):
            if status == "ok":
                info["ok"].append(sid)
                outputs += [self.scan_dir(sid) / "hu.npz", self.scan_dir(sid) / "mask.npz"]
            else:
                info[status][sid] = msg
                log.warning("%s %s: %s", sid, status, msg)
        return outputs, info

    def _stage_mip(self):
        jobs = [(sid, str(self.scan_dir(sid)), self.cfg.thicknesses) for sid in self.usable_scans()]
        outputs = [p for _, outs in self._map(_mip_one, jobs) for p in outs]
        return outputs, {"scans": len(jobs)}

    def _anns_by_series(self):
        by = defaultdict(list)
        for a in self.annotations():
            by[a.series_id].append(a)
        return by

    def _stream_data(self, scans, t, anns):
        images, labels = [], []
        for sid in scans:
            stack = load_stack(self.scan_dir(sid) / f"mip_t{t}.npz")
            images.append(stack.images)
            labels.append(rasterize_labels(anns.get(sid, []), stack))
        if not images:
            return None, None
        return np.concatenate(images), np.concatenate(labels)

    def _stage_train_detect(self):
        plan = self.plan()
        anns = self._anns_by_series()
        out_dir = self.fold_dir() / "detect"
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs, info = [], {}
        for t in self.cfg.thicknesses:
            x, y = self._stream_data(plan.train, t, anns)
            if x is None:
                raise MipCadError(f"fold {plan.fold} has no training scans")
            vx, vy = self._stream_data(plan.val, t, anns)
            model = train_detector(x, y, self.cfg.detect2d, vx, vy, thickness=t, log_path=out_dir / f"train_log_t{t}.jsonl")
            path = model.save(out_dir / f"model_t{t}.bin")
            outputs += [path, out_dir / f"train_log_t{t}.jsonl"]
            info[f"t{t}"] = {"stop_epoch": model.stop_epoch, "epochs": len(model.history)}
        return outputs, info

    def _stage_detect(self):
        plan = self.plan()
        out_dir = self.fold_dir() / "candidates"
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs, info = [], {}
        for t in self.cfg.thicknesses:
            model = DetectorModel.load(self.fold_dir() / "detect" / f"model_t{t}.bin")
            cands = []
            for sid in plan.all_scans:
                stack = load_stack(self.scan_dir(sid) / f"mip_t{t}.npz")
                maps = predict_maps(model, stack)
                cands += stream_candidates(maps, stack, self.cfg.map_threshold, self.cfg.distance_ratio, self.cfg.max_box_mm)
            outputs.append(write_candidates(cands, out_dir / f"stream_t{t}.csv"))
            info[f"t{t}"] = len(cands)
        return outputs, info

    def _stage_merge(self):
        cdir = self.fold_dir() / "candidates"
        streams = [read_candidates(cdir / f"stream_t{t}.csv") for t in self.cfg.thicknesses]
        fused = fuse_streams(streams, self.cfg.distance_ratio, self.cfg.fuse_cover)
        return [write_candidates(fused, cdir / "stage1.csv")], {"candidates": len(fused)}

    def _patches(self, scans, cands_by, anns):
        """Patches for every stage-1 candidate (fused and per stream) plus one
        positive centred on each annotated nodule; labels use the hit rule."""
        big, small, labels = [], [], []
        for sid in scans:
            cands = cands_by.get(sid, [])
            nodules = anns.get(sid, [])
            if not cands and not nodules:
                continue
            vol = normalize_hu(load_volume_cache(self.scan_dir(sid) / "hu.npz"))
            m = match_candidates(cands, nodules)
            positive = {i for idx in m.hits.values() for i in idx}
            items = [(c, int(i in positive)) for i, c in enumerate(cands)]
            for a in nodules:
                v = tuple(float(x) for x in world_to_voxel(vol, a.center_world))
                items.append((Candidate(sid, v, a.center_world, a.diameter / vol.spacing[0], frozenset({1})), 1))
            for c, label in items:
                big.append(extract_patch(vol, c, 32).voxels)
                small.append(extract_patch(vol, c, 16).voxels)
                labels.append(label)
        if not labels:
            return None, None, None
        return np.stack(big), np.stack(small), np.array(labels)

    def _stage_train_fpr(self):
        plan = self.plan()
        anns = self._anns_by_series()
        cdir = self.fold_dir() / "candidates"
        cands_by = defaultdict(list)
        for name in ["stage1.csv", *(f"stream_t{t}.csv" for t in self.cfg.thicknesses)]:
            for c in read_candidates(cdir / name):
                cands_by[c.series_id].append(c)
        big, small, y = self._patches(plan.train, cands_by, anns)
        if y is None:
            raise MipCadError("no stage-1 candidates on training scans")
        vbig, vsmall, vy = self._patches(plan.val, cands_by, anns)
        out_dir = self.fold_dir() / "fpr"
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs, info = [], {"train_pos": int(y.sum()), "train_neg": int((y == 0).sum())}
        for name, x, vx in (("archi2", big, vbig), ("archi3", small, vsmall)):
            model = train_fpr(x, y, name, self.cfg.fpr3d, vx, vy, log_path=out_dir / f"train_log_{name}.jsonl")
            outputs += [model.save(out_dir / f"{name}.bin"), out_dir / f"train_log_{name}.jsonl"]
            info[name] = {"epochs": len(model.history)}
        return outputs, info

    def _stage_score(self):
        plan = self.plan()
        models = {n: FprModel.load(self.fold_dir() / "fpr" / f"{n}.bin") for n in ("archi2", "archi3")}
        cands_by = defaultdict(list)
        for c in read_candidates(self.fold_dir() / "candidates" / "stage1.csv"):
            cands_by[c.series_id].append(c)
        scored = []
        for sid in plan.test:
            if cands_by.get(sid):
                vol = normalize_hu(load_volume_cache(self.scan_dir(sid) / "hu.npz"))
                scored += score_candidates(vol, cands_by[sid], models)
        return [write_candidates(scored, self.fold_dir() / "scored.csv")], {"candidates": len(scored)}

    def _test_annotations(self, plan):
        test = set(plan.test)
        return [a for a in self.annotations() if a.series_id in test]

    def _stage_froc(self):
        plan = self.plan()
        cands = read_candidates(self.fold_dir() / "scored.csv")
        result = froc(cands, self._test_annotations(plan), len(plan.test), series_ids=plan.test)
        csv_path = rep.write_froc_csv(result, self.fold_dir() / "froc.csv")
        summary = {
            "fold": plan.fold,
            "scans": result.scan_count,
            "nodules": result.nodule_count,
            "operating_points": {str(k): v for k, v in result.sensitivities.items()},
            "cpm": result.cpm,
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
        }
        json_path = self.fold_dir() / "froc.json"
        json_path.write_text(json.dumps(summary, indent=1))
        return [csv_path, json_path], summary

    def _stage_report(self):
        plan = self.plan()
        test = set(plan.test)
        anns = self._test_annotations(plan)
        cdir = self.fold_dir() / "candidates"
        rows = []
        for i, t in enumerate(self.cfg.thicknesses, 1):
            cands = [c for c in read_candidates(cdir / f"stream_t{t}.csv") if c.series_id in test]
            rows.append(rep.stage1_row(f"Stream {i}", f"{t} mm", stage1_metrics(cands, anns, len(plan.test))))
        fused = [c for c in read_candidates(cdir / "stage1.csv") if c.series_id in test]
        rows.append(rep.stage1_row("Fusion", "-", stage1_metrics(fused, anns, len(plan.test))))
        scored = read_candidates(self.fold_dir() / "scored.csv")
        result = froc(scored, anns, len(plan.test), series_ids=plan.test)

        out_dir = self.fold_dir() / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        png = rep.plot_froc({f"fold {plan.fold} ({len(plan.test)} scans)": result}, out_dir / "froc.png")
        froc_rows = [rep.froc_row("this run", result), rep.REFERENCE_FROC]
        text = "\n\n".join(
            [
                f"config {self.cfg.digest()}  seed {self.cfg.seed}  fold {plan.fold}  "
                f"train/val/test scans {len(plan.train)}/{len(plan.val)}/{len(plan.test)}  nodules {len(anns)}",
                rep.format_stage1_table(rows, "Candidate detection (this run, test scans)"),
                rep.format_stage1_table(rep.REFERENCE_STAGE1, "Candidate detection (reference targets, 888 scans)"),
                rep.format_froc_table(froc_rows, OPERATING_POINTS, "FROC operating points"),
                f"CPM (0.125-8 FPs/scan): {result.cpm:.4f}",
            ]
        )
        txt = out_dir / "summary.txt"
        txt.write_text(text + "\n")
        stage1_json = out_dir / "stage1.json"
        stage1_json.write_text(json.dumps(rows, indent=1))
        return [txt, png, stage1_json], {"cpm": result.cpm}


def run_pipeline(cfg: PipelineConfig, stage: str, force: bool = False):
    """Run one stage (or ``"all"``) and return its result(s)."""
    pipe = Pipeline(cfg)
    if stage == "all":
        return pipe.run_all(force)
    return pipe.run(stage, force)
