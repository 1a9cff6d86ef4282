"""Cross-validation fold plans."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParameterError

TRAIN_SHARE = 0.7  # of the non-test scans: 0.9 * 0.7 = 63 % overall


@dataclass(frozen=True)
class FoldPlan:
    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    @property
    def all_scans(self) -> tuple[str, ...]:
        return self.train + self.val + self.test

    def role(self, series_id: str) -> str:
        for name in ("train", "val", "test"):
            if series_id in getattr(self, name):
                return name
        raise KeyError(series_id)


def make_fold_plan(subsets, fold: int, seed: int = 0, train_share: float = TRAIN_SHARE) -> FoldPlan:
    """Test on ``subsets[fold]``; split the other scans 70/30 into train/validation."""
    subsets = [list(s) for s in subsets]
    if not 0 <= fold < len(subsets):
        raise ParameterError(f"fold must be in [0, {len(subsets) - 1}], got {fold}")
    flat = [s for sub in subsets for s in sub]
    if len(flat) != len(set(flat)):
        raise ContractError("subsets overlap")
    rest = sorted(s for i, sub in enumerate(subsets) if i != fold for s in sub)
    rng = np.random.default_rng([seed, fold])
    rng.shuffle(rest)
    n_train = int(math.floor(len(rest) * train_share + 0.5))
    return FoldPlan(fold, tuple(sorted(rest[:n_train])), tuple(sorted(rest[n_train:])), tuple(sorted(subsets[fold])))


def assign_subsets(series_ids, n_subsets: int) -> list[list[str]]:
    """Deal sorted series ids round-robin into ``n_subsets`` lists."""
    ids = sorted(series_ids)
    return [ids[i::n_subsets] for i in range(n_subsets)]


def discover_subsets(data_root: Path) -> list[list[str]] | None:
    """LUNA16 layout: ``subset0/ .. subset9/`` folders of ``.mhd`` files."""
    dirs = sorted(
        (p for p in Path(data_root).glob("subset*") if p.is_dir() and p.name[6:].isdigit()),
        key=lambda p: int(p.name[6:]),
    )
    if not dirs:
        return None
    return [sorted(f.stem for f in d.glob("*.mhd")) for d in dirs]
