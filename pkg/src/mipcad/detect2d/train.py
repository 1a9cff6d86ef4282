"""Training and inference for one detection stream."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ContractError
from ..mip import MipStack
from ..training import PlateauSchedule, load_artifact, save_artifact, seed_everything, set_lr
from .labels import augment_2d
from .losses import soft_dice_loss
from .unet import UNet2D, UNetSpec, he_init_

log = logging.getLogger(__name__)


@dataclass
class TrainConfig2D:
    batch_size: int = 5
    lr: float = 1e-3
    min_lr: float = 1e-7
    lr_factor: float = 0.01
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 200
    max_steps: int | None = None
    base_width: int = 32
    augment: bool = True
    max_shift: int = 30
    negatives_per_positive: float | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig2D":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class DetectorModel:
    net: UNet2D
    thickness: int
    config: TrainConfig2D = field(default_factory=TrainConfig2D)
    history: list[dict] = field(default_factory=list)
    stop_epoch: int | None = None

    def descriptor(self) -> dict:
        return {
            "kind": "unet2d",
            "architecture": self.net.spec.to_dict(),
            "slab_thickness": self.thickness,
            "config": asdict(self.config),
            "stop_epoch": self.stop_epoch,
        }

    def save(self, path) -> Path:
        return save_artifact(path, self.descriptor(), self.net.state_dict())

    @classmethod
    def load(cls, path) -> "DetectorModel":
        desc, state = load_artifact(path)
        if desc.get("kind") != "unet2d":
            raise ContractError(f"{path} holds a {desc.get('kind')} model, not a 2-D detector")
        net = UNet2D(UNetSpec(**desc["architecture"]))
        net.load_state_dict(state)
        net.eval()
        return cls(net, int(desc["slab_thickness"]), TrainConfig2D.from_dict(desc["config"]), stop_epoch=desc.get("stop_epoch"))


def _as_batch(images) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)[:, None])


def _epoch_indices(labels: np.ndarray, cfg: TrainConfig2D, rng: np.random.Generator) -> np.ndarray:
    positive = labels.reshape(len(labels), -1).any(axis=1)
    pos, neg = np.flatnonzero(positive), np.flatnonzero(~positive)
    if cfg.negatives_per_positive is not None and len(pos):
        take = min(len(neg), int(round(cfg.negatives_per_positive * len(pos))))
        neg = rng.choice(neg, size=take, replace=False)
    idx = np.concatenate([pos, neg])
    rng.shuffle(idx)
    return idx


def _evaluate(net: UNet2D, images: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    net.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = _as_batch(images[s : s + batch_size])
            y = _as_batch(labels[s : s + batch_size])
            total += float(soft_dice_loss(net(x), y)) * len(x)
            count += len(x)
    return total / max(count, 1)


def train_detector(
    images,
    labels,
    cfg: TrainConfig2D = TrainConfig2D(),
    val_images=None,
    val_labels=None,
    thickness: int = 1,
    log_path=None,
) -> DetectorModel:
    """Fit a U-Net with soft dice loss and Adam; keep the best-validation weights.

    Positive images (any labelled pixel) are augmented on the fly; negatives
    pass through unchanged. Without a validation set the training loss
    drives the schedule.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    if len(images) == 0:
        raise ContractError("empty training set")
    if images.shape != labels.shape:
        raise ContractError(f"images {images.shape} and labels {labels.shape} differ")
    size = images.shape[-1]
    gen = seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = he_init_(UNet2D(UNetSpec(input_size=size, base_width=cfg.base_width)), gen)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.lr_factor, cfg.min_lr, cfg.plateau_patience, cfg.early_stop_patience)
    has_val = val_images is not None and len(val_images) > 0
    if has_val:
        val_images = np.asarray(val_images, dtype=np.float32)
        val_labels = np.asarray(val_labels, dtype=np.float32)

    best_state = copy.deepcopy(net.state_dict())
    history, steps, stop_epoch = [], 0, None
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            net.train()
            idx = _epoch_indices(labels, cfg, rng)
            running, seen = 0.0, 0
            for s in range(0, len(idx), cfg.batch_size):
                batch = idx[s : s + cfg.batch_size]
                xs, ys = [], []
                for i in batch:
                    x, y = images[i], labels[i]
                    if cfg.augment and y.any():
                        x, y = augment_2d(x, y, rng, cfg.max_shift)
                    xs.append(x)
                    ys.append(y)
                x, y = _as_batch(xs), _as_batch(ys)
                if len(batch) == 1:
                    # batch norm needs more than one value per channel
                    x, y = torch.cat([x, x]), torch.cat([y, y])
                opt.zero_grad()
                loss = soft_dice_loss(net(x), y)
                loss.backward()
                opt.step()
                running += loss.item() * len(batch)
                seen += len(batch)
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
            train_loss = running / max(seen, 1)
            val_loss = _evaluate(net, val_images, val_labels, cfg.batch_size) if has_val else train_loss
            stop = sched.step(val_loss)
            if sched.improved:
                best_state = copy.deepcopy(net.state_dict())
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.param_groups[0]["lr"]}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("t=%d epoch %d train %.4f val %.4f lr %.1e", thickness, epoch, train_loss, val_loss, record["lr"])
            set_lr(opt, sched.lr)
            if stop or (cfg.max_steps is not None and steps >= cfg.max_steps):
                stop_epoch = epoch
                break
    finally:
        if log_fh:
            log_fh.close()
    net.load_state_dict(best_state)
    net.eval()
    return DetectorModel(net, int(thickness), cfg, history, stop_epoch)


def predict_images(net: UNet2D, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    m = 2**net.spec.levels
    ph, pw = -h % m, -w % m
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, ph), (0, pw)))
    out = np.empty((n, h, w), dtype=np.float32)
    net.eval()
    with torch.no_grad():
        for s in range(0, n, batch_size):
            pred = net(_as_batch(images[s : s + batch_size]))[:, 0].numpy()
            out[s : s + batch_size] = pred[:, :h, :w]
    return out


def predict_maps(model: DetectorModel, stack: MipStack, batch_size: int = 8) -> np.ndarray:
    if model.thickness != stack.slab_thickness:
        raise ContractError(
            f"model trained for {model.thickness} mm slabs cannot read a {stack.slab_thickness} mm stack"
        )
    return predict_images(model.net, stack.images, batch_size)
