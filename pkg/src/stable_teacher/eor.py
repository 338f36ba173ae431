"""Error Recovery network: a class-agnostic U-Net refining a localization map.

It sees only the (detached) localization map, never the clip or the class
logits, and is trained from scratch alongside the base detector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .types import LocalizationMap


@dataclass
class EoRConfig:
    depth: int = 4
    channels: Sequence[int] = field(default_factory=lambda: [16, 32, 64, 128])
    seed: int = 0
    volumetric: bool = True  # False: per-frame 2D variant

    def validate(self) -> None:
        if len(self.channels) != self.depth:
            raise ValueError(f"{len(self.channels)} channel widths for depth {self.depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if c % 8 == 0 else 1, c)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, mid: int, conv=nn.Conv3d):
        super().__init__(
            conv(cin, mid, 3, padding=1, bias=False), _gn(mid), nn.ReLU(inplace=True),
            conv(mid, cout, 3, padding=1, bias=False), _gn(cout), nn.ReLU(inplace=True),
        )


class ErrorRecovery(nn.Module):
    """U-Net with max-pool downsampling and trilinear upsampling + concat skips.

    Encoder blocks widen in two steps (first conv to ``max(out // 2, in)``),
    which with the default 16/32/64/128 widths gives roughly 1.0M parameters.
    """

    def __init__(self, config: EoRConfig):
        super().__init__()
        config.validate()
        self.config = config
        conv = nn.Conv3d if config.volumetric else nn.Conv2d
        self.pool = nn.MaxPool3d(2) if config.volumetric else nn.MaxPool2d(2)
        self.mode = "trilinear" if config.volumetric else "bilinear"
        ch = list(config.channels)
        self.encoders = nn.ModuleList()
        cin = 1
        for c in ch:
            self.encoders.append(DoubleConv(cin, c, max(c // 2, cin), conv))
            cin = c
        self.decoders = nn.ModuleList(
            DoubleConv(ch[i + 1] + ch[i], ch[i], ch[i], conv) for i in reversed(range(len(ch) - 1))
        )
        self.head = conv(ch[0], 1, 1)

    @property
    def multiple(self) -> int:
        return 2 ** (self.config.depth - 1)

    def _net(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[2:], mode=self.mode, align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def forward(self, raw: torch.Tensor, pad: bool = True) -> torch.Tensor:
        """``raw``: B x T x H x W map in [0, 1]. Returns a refined map, same shape."""
        b, t, h, w = raw.shape
        m = self.multiple
        dims = (t, h, w) if self.config.volumetric else (h, w)
        need = [(-d) % m for d in dims]
        if any(need):
            if not pad:
                raise ValueError(
                    f"map dims {dims} must be multiples of {m}; zero-pad each by {need} "
                    "(or call with pad=True)"
                )
        # F.pad lists the last dimension first
        padding = []
        for n in reversed(need):
            padding += [n // 2, n - n // 2]
        if self.config.volumetric:
            x = F.pad(raw.unsqueeze(1), padding)
            out = self._net(x)[:, 0]
        else:
            x = F.pad(raw.reshape(b * t, 1, h, w), padding)
            out = self._net(x)[:, 0]
        crops = [slice(n // 2, n // 2 + d) for n, d in zip(need, dims)]
        if self.config.volumetric:
            out = out[:, crops[0], crops[1], crops[2]]
        else:
            out = out[:, crops[0], crops[1]].reshape(b, t, h, w)
        return torch.sigmoid(out)


def init_eor(config: EoRConfig | None = None) -> ErrorRecovery:
    config = config or EoRConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ErrorRecovery(config)
    return model


def eor_forward(model: ErrorRecovery, raw: LocalizationMap) -> LocalizationMap:
    """Refine one map without tracking gradients."""
    x = torch.as_tensor(raw.values, dtype=torch.float32)[None]
    model.eval()
    with torch.no_grad():
        out = model(x)
    return LocalizationMap(out[0].double().numpy())
