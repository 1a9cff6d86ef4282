"""Encoder-decoder segmentation network for 2-D slab images."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ParameterError


@dataclass(frozen=True)
class UNetSpec:
    input_size: int = 512
    base_width: int = 32
    levels: int = 4
    kernel: int = 3

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**i for i in range(self.levels))

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2**self.levels

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return self.encoder_widths[::-1]

    @property
    def conv_layer_count(self) -> int:
        # two 3x3 convs per encoder level, bottleneck and decoder level
        return 2 * (2 * self.levels + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def he_std(fan_in: int) -> float:
    """Standard deviation that keeps ReLU activations' variance constant with depth."""
    if fan_in < 1:
        raise ParameterError(f"fan-in must be >= 1, got {fan_in}")
    return math.sqrt(2.0 / fan_in)


def fan_in(weight: torch.Tensor) -> int:
    # (out, in, *kernel): in-channels times kernel area/volume
    return int(weight.shape[1] * math.prod(weight.shape[2:]))


def he_init_(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Zero-mean Gaussian weights with variance 2/fan-in, zero biases, for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, he_std(fan_in(m.weight)), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
    return module


class ConvBnRelu(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=kernel // 2),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__(ConvBnRelu(cin, cout, kernel), ConvBnRelu(cout, cout, kernel))


class UNet2D(nn.Module):
    """Four pooling levels, nearest-neighbour 2x up-sampling with skip concatenation.

    Output is a one-channel sigmoid map of the input's spatial size; the
    spatial size must be divisible by ``2**levels``.
    """

    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        self.spec = spec
        k = spec.kernel
        self.encoders = nn.ModuleList()
        cin = 1
        for w in spec.encoder_widths:
            self.encoders.append(DoubleConv(cin, w, k))
            cin = w
        self.pool = nn.MaxPool2d(2, stride=2)
        self.bottleneck = DoubleConv(cin, spec.bottleneck_width, k)
        cin = spec.bottleneck_width
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.decoders = nn.ModuleList()
        for w in spec.decoder_widths:
            self.decoders.append(DoubleConv(cin + w, w, k))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(torch.cat([self.up(x), skip], dim=1))
        return self.head(x)


def conv_census(model: nn.Module) -> dict[str, int]:
    convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)]
    return {
        "conv3x3": sum(1 for m in convs if m.kernel_size == (3, 3)),
        "conv1x1": sum(1 for m in convs if m.kernel_size == (1, 1)),
        "batchnorm": sum(1 for m in model.modules() if isinstance(m, nn.BatchNorm2d)),
    }
