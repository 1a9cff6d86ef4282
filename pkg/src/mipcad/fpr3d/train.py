"""Training, scoring and the three-way ensemble for false positive reduction."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..ct_ingest import CtVolume
from ..detect2d.unet import he_init_
from ..errors import ContractError
from ..training import PlateauSchedule, load_artifact, save_artifact, seed_everything, set_lr
from .archi import ARCHITECTURES, ArchiSpec, PatchClassifier
from .patches import augment_3d, extract_patch

log = logging.getLogger(__name__)

ROUTE_SIDE_PX = 16


@dataclass
class TrainConfig3D:
    batch_size: int = 16
    lr: float = 1e-4
    max_epochs: int = 100
    early_stop_patience: int = 10
    base_width: int = 16
    dense_width: int = 128
    positive_fraction: float = 0.25  # positives : negatives ~ 1 : 3 after oversampling
    augment: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig3D":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FprModel:
    net: PatchClassifier
    config: TrainConfig3D = field(default_factory=TrainConfig3D)
    history: list[dict] = field(default_factory=list)

    @property
    def spec(self) -> ArchiSpec:
        return self.net.spec

    def descriptor(self) -> dict:
        return {"kind": "patch3d", "architecture": self.spec.to_dict(), "config": asdict(self.config)}

    def save(self, path) -> Path:
        return save_artifact(path, self.descriptor(), self.net.state_dict())

    @classmethod
    def load(cls, path) -> "FprModel":
        desc, state = load_artifact(path)
        if desc.get("kind") != "patch3d":
            raise ContractError(f"{path} holds a {desc.get('kind')} model, not a patch classifier")
        net = PatchClassifier(ArchiSpec.from_dict(desc["architecture"]))
        net.load_state_dict(state)
        net.eval()
        return cls(net, TrainConfig3D.from_dict(desc["config"]))

    def predict(self, patches, batch_size: int = 64) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float32)
        out = np.empty(len(patches), dtype=np.float64)
        self.net.eval()
        with torch.no_grad():
            for s in range(0, len(patches), batch_size):
                x = torch.from_numpy(np.ascontiguousarray(patches[s : s + batch_size])[:, None])
                out[s : s + batch_size] = self.net.predict_proba(x).double().numpy()
        return out


def binary_cross_entropy(p, y, eps: float = 1e-12):
    """Mean ``-(y log p + (1 - y) log(1 - p))``; works on numpy arrays and tensors."""
    if isinstance(p, torch.Tensor):
        p = p.clamp(eps, 1 - eps)
        return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def _epoch_indices(labels: np.ndarray, cfg: TrainConfig3D, rng: np.random.Generator) -> np.ndarray:
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    want = int(round(cfg.positive_fraction / (1 - cfg.positive_fraction) * len(neg)))
    extra = rng.choice(pos, size=max(0, want - len(pos)), replace=True) if len(pos) else pos
    idx = np.concatenate([pos, extra, neg])
    rng.shuffle(idx)
    return idx


def _val_loss(net, patches, labels, batch_size=64) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(patches), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(patches[s : s + batch_size], dtype=np.float32)[:, None])
            y = torch.from_numpy(labels[s : s + batch_size].astype(np.int64))
            total += float(F.cross_entropy(net(x), y, reduction="sum"))
    return total / max(len(patches), 1)


def train_fpr(
    patches,
    labels,
    spec: ArchiSpec | str,
    cfg: TrainConfig3D = TrainConfig3D(),
    val_patches=None,
    val_labels=None,
    log_path=None,
) -> FprModel:
    """Train a binary patch classifier with cross-entropy and Adam.

    Positives are oversampled with random quarter-turn rotations until they
    make up ``cfg.positive_fraction`` of each epoch; negatives are used as is.
    """
    patches = np.asarray(patches, dtype=np.float32)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if len(patches) != len(labels):
        raise ContractError("patch and label counts differ")
    if len(np.unique(labels)) < 2:
        raise ContractError("training set must contain both nodules and non-nodules")
    if isinstance(spec, str):
        spec = ARCHITECTURES[spec](cfg.base_width, cfg.dense_width)
    if patches.shape[1:] != (spec.input_side,) * 3:
        raise ContractError(f"{spec.name} expects {spec.input_side}^3 patches, got {patches.shape[1:]}")

    gen = seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = he_init_(PatchClassifier(spec), gen)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, 1.0, cfg.lr, cfg.early_stop_patience + 1, cfg.early_stop_patience)
    has_val = val_patches is not None and len(val_patches) > 0
    if has_val:
        val_patches = np.asarray(val_patches, dtype=np.float32)
        val_labels = np.asarray(val_labels).astype(np.int64).reshape(-1)

    best_state = copy.deepcopy(net.state_dict())
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            net.train()
            idx = _epoch_indices(labels, cfg, rng)
            running = 0.0
            for s in range(0, len(idx), cfg.batch_size):
                batch = idx[s : s + cfg.batch_size]
                xs = []
                for i in batch:
                    x = patches[i]
                    if cfg.augment and labels[i] == 1:
                        x, _ = augment_3d(x, 1, rng)
                    xs.append(x)
                if len(xs) == 1:
                    xs, batch = xs * 2, np.concatenate([batch, batch])
                x = torch.from_numpy(np.stack(xs)[:, None])
                y = torch.from_numpy(labels[batch])
                opt.zero_grad()
                loss = F.cross_entropy(net(x), y)
                loss.backward()
                opt.step()
                running += loss.item() * len(batch)
            train_loss = running / len(idx)
            val_loss = _val_loss(net, val_patches, val_labels) if has_val else train_loss
            stop = sched.step(val_loss)
            if sched.improved:
                best_state = copy.deepcopy(net.state_dict())
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.param_groups[0]["lr"]}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("%s epoch %d train %.4f val %.4f", spec.name, epoch, train_loss, val_loss)
            set_lr(opt, sched.lr)
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
    net.load_state_dict(best_state)
    net.eval()
    return FprModel(net, cfg, history)


def fuse_probabilities(p_archi2, p_archi3, bbox_side, route_side: float = ROUTE_SIDE_PX):
    """Equal thirds: the 32-cube model, the 16-cube model, and the size-routed one."""
    p2 = np.asarray(p_archi2, dtype=np.float64)
    p3 = np.asarray(p_archi3, dtype=np.float64)
    routed = np.where(np.asarray(bbox_side) < route_side, p3, p2)
    out = (p2 + p3 + routed) / 3.0
    return float(out) if out.ndim == 0 else out


def _require(models: dict) -> tuple[FprModel, FprModel]:
    missing = {"archi2", "archi3"} - set(models or {})
    if missing:
        raise ContractError(f"ensemble needs models {sorted(missing)}")
    return models["archi2"], models["archi3"]


def score_candidates(volume: CtVolume, cands, models: dict, route_side: float = ROUTE_SIDE_PX) -> list:
    """Return the candidates with ``probability`` set to the ensemble score."""
    m2, m3 = _require(models)
    cands = list(cands)
    if not cands:
        return []
    big = np.stack([extract_patch(volume, c, m2.spec.input_side).voxels for c in cands])
    small = np.stack([extract_patch(volume, c, m3.spec.input_side).voxels for c in cands])
    scores = fuse_probabilities(m2.predict(big), m3.predict(small), [c.bbox_side for c in cands], route_side)
    return [replace(c, probability=float(p)) for c, p in zip(cands, np.atleast_1d(scores))]


def ensemble_score(candidate, models: dict, volume: CtVolume, route_side: float = ROUTE_SIDE_PX) -> float:
    return score_candidates(volume, [candidate], models, route_side)[0].probability
