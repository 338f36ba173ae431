"""Reference base action detector: a small volumetric encoder-decoder.

The network returns clip-level class logits (global pooling of the deepest
features) and a per-frame foreground map squashed through a logistic.
GroupNorm is used throughout, so training and evaluation modes compute the
same function and a teacher never needs normalization statistics of its own.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .types import LocalizationMap, ModelOutput, VideoClip


@dataclass
class DetectorConfig:
    num_classes: int = 6
    clip_len: int = 8
    height: int = 32
    width: int = 32
    channels: Sequence[int] = field(default_factory=lambda: [16, 32, 64])
    in_channels: int = 3
    seed: int = 0

    @property
    def depth(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.channels:
            raise ValueError("channels must be non-empty")
        div = 2 ** self.depth
        if self.height % div or self.width % div:
            raise ValueError(f"height/width must be divisible by {div} for depth {self.depth}")
        tdiv = 2 ** (self.depth - 1)
        if self.clip_len % tdiv:
            raise ValueError(f"clip_len must be divisible by {tdiv} for depth {self.depth}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
            norm(cout),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1, bias=False),
            norm(cout),
            nn.ReLU(inplace=True),
        )


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = list(config.channels)
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for i, c in enumerate(ch):
            self.encoders.append(ConvBlock(cin, c, stride=1 if i == 0 else 2))
            cin = c
        self.classifier = nn.Linear(ch[-1], config.num_classes)
        self.decoders = nn.ModuleList(
            ConvBlock(ch[i + 1] + ch[i], ch[i]) for i in reversed(range(len(ch) - 1))
        )
        self.loc_head = nn.Conv3d(ch[0], 1, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: B x C x T x H x W. Returns logits (B x K) and map (B x T x H x W)."""
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        logits = self.classifier(x.mean(dim=(2, 3, 4)))
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        loc = torch.sigmoid(self.loc_head(x)).squeeze(1)
        return logits, loc


def init_detector(config: DetectorConfig) -> Detector:
    """Build a detector whose initial weights depend only on ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = Detector(config)
    return model


def make_teacher(student: nn.Module) -> nn.Module:
    """Exact, gradient-free copy of ``student``."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def clips_to_tensor(clips: Sequence[VideoClip]) -> torch.Tensor:
    """Stack F x H x W x C clips into a B x C x F x H x W float tensor."""
    arr = np.stack([np.asarray(c.frames, dtype=np.float32) for c in clips])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 4, 1, 2, 3)))


def forward(model: Detector, clip: VideoClip) -> ModelOutput:
    """Evaluation-mode forward of one clip."""
    cfg = model.config
    F_, H, W, C = clip.shape
    if (F_, H, W, C) != (cfg.clip_len, cfg.height, cfg.width, cfg.in_channels):
        raise ValueError(
            f"clip shape {(F_, H, W, C)} does not match detector "
            f"{(cfg.clip_len, cfg.height, cfg.width, cfg.in_channels)}"
        )
    model.eval()
    with torch.no_grad():
        logits, loc = model(clips_to_tensor([clip]))
    return ModelOutput(class_logits=logits[0].double().numpy(),
                       loc_map=LocalizationMap(loc[0].double().numpy()))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
