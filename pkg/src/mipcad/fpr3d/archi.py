"""VGG-style 3-D patch classifiers for 16- and 32-voxel cubes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class ArchiSpec:
    name: str
    input_side: int
    convs_per_block: tuple[int, ...]
    base_width: int = 16
    dense_width: int = 128

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**i for i in range(len(self.convs_per_block)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs_per_block"] = list(self.convs_per_block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchiSpec":
        d = dict(d)
        d["convs_per_block"] = tuple(d["convs_per_block"])
        return cls(**d)


def archi3(base_width: int = 16, dense_width: int = 128) -> ArchiSpec:
    return ArchiSpec("archi3", 16, (2, 2, 2), base_width, dense_width)


def archi2(base_width: int = 16, dense_width: int = 128) -> ArchiSpec:
    return ArchiSpec("archi2", 32, (2, 2, 2, 3), base_width, dense_width)


ARCHITECTURES = {"archi2": archi2, "archi3": archi3}


class PatchClassifier(nn.Module):
    """Blocks of [convs + ReLU, max-pool, batch-norm], global max pool, two dense layers.

    ``forward`` returns two-class logits; ``predict_proba`` the soft-max
    probability of the nodule class.
    """

    def __init__(self, spec: ArchiSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = 1
        for n_convs, width in zip(spec.convs_per_block, spec.widths):
            for _ in range(n_convs):
                layers += [nn.Conv3d(cin, width, 3, padding=1), nn.ReLU(inplace=True)]
                cin = width
            layers += [nn.MaxPool3d(2), nn.BatchNorm3d(width)]
        self.features = nn.Sequential(*layers)
        self.dense = nn.Sequential(nn.Linear(cin, spec.dense_width), nn.ReLU(inplace=True), nn.Linear(spec.dense_width, 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        x = torch.amax(x, dim=(2, 3, 4))
        return self.dense(x)

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)[:, 1]


def layer_census(model: nn.Module) -> dict[str, int]:
    convs = sum(isinstance(m, nn.Conv3d) for m in model.modules())
    pools = sum(isinstance(m, nn.MaxPool3d) for m in model.modules())
    norms = sum(isinstance(m, nn.BatchNorm3d) for m in model.modules())
    widest = max(m.out_channels for m in model.modules() if isinstance(m, nn.Conv3d))
    return {"conv": convs, "pool": pools, "norm": norms, "total": convs + pools + norms, "max_width": widest}
