"""Pieces shared by the 2-D detector and 3-D classifier training loops."""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

_MAGIC = b"MIPCADM1"


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class PlateauSchedule:
    """Learning-rate reduction on plateau plus early stopping.

    ``step`` is fed one validation loss per epoch. The rate is multiplied by
    ``factor`` after ``plateau_patience`` epochs without improvement (never
    below ``min_lr``); training stops after ``stop_patience`` such epochs.
    """

    lr: float = 1e-3
    factor: float = 0.01
    min_lr: float = 1e-7
    plateau_patience: int = 5
    stop_patience: int = 10
    best: float = float("inf")
    best_epoch: int = 0
    epoch: int = 0
    bad_epochs: int = 0
    _since_reduce: int = field(default=0, repr=False)

    def step(self, val_loss: float) -> bool:
        """Record an epoch; return True when training should stop."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            self._since_reduce = 0
            return False
        self.bad_epochs += 1
        self._since_reduce += 1
        if self._since_reduce >= self.plateau_patience and self.lr > self.min_lr:
            # relative tolerance so 1e-3 * 0.01 * 0.01 lands on the 1e-7 floor
            self.lr = max(self.lr * self.factor, self.min_lr)
            if abs(self.lr - self.min_lr) <= 1e-9 * self.min_lr:
                self.lr = self.min_lr
            self._since_reduce = 0
        return self.bad_epochs >= self.stop_patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def save_artifact(path, descriptor: dict, state_dict: dict) -> Path:
    """Serialize a model as magic, JSON descriptor length + bytes, torch weight blob."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state_dict.items()}, buf)
    head = json.dumps(descriptor, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(buf.getvalue())
    return path


def load_artifact(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise FormatError(f"{path}: not a model artifact")
    n = int.from_bytes(blob[8:16], "little")
    descriptor = json.loads(blob[16 : 16 + n].decode())
    state = torch.load(io.BytesIO(blob[16 + n :]), map_location="cpu", weights_only=True)
    return descriptor, state


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
