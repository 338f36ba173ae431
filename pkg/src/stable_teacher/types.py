"""Shared data model: clips, localization maps, annotations and model outputs.

Pixel convention: boxes are half-open ``[x0, x1) x [y0, y1)`` in pixel units and
pixel ``(r, c)`` has its center at ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Box = tuple[float, float, float, float]


class InvalidRegionError(ValueError):
    pass


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # F x H x W x C, values in [0, 1]
    frame_rate_hint: Optional[float] = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.frames.shape)


@dataclass(frozen=True)
class LocalizationMap:
    values: np.ndarray  # F x H x W, values in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"localization map must be F x H x W, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("localization map values must be finite and in [0, 1]")


@dataclass(frozen=True)
class ClassDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("class distribution must be a non-negative vector summing to 1")

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "ClassDistribution":
        z = np.asarray(logits, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ValueError("logits must be finite")
        z = z - z.max()
        e = np.exp(z)
        return cls(e / e.sum())

    @property
    def top_class(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class FrameAnnotation:
    """Per-frame region: a box, a binary mask, both, or neither (absent)."""

    box: Optional[Box] = None
    mask: Optional[np.ndarray] = None

    @property
    def present(self) -> bool:
        return self.box is not None or self.mask is not None

    @classmethod
    def absent(cls) -> "FrameAnnotation":
        return cls()

    def hflip(self, width: int) -> "FrameAnnotation":
        if not self.present:
            return self
        box = None
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            box = (width - x1, y0, width - x0, y1)
        mask = None if self.mask is None else self.mask[:, ::-1].copy()
        return FrameAnnotation(box=box, mask=mask)

    def to_mask(self, height: int, width: int) -> np.ndarray:
        if self.mask is not None:
            return np.asarray(self.mask, dtype=bool)
        if self.box is not None:
            return box_to_mask(self.box, height, width)
        return np.zeros((height, width), dtype=bool)


@dataclass
class Sample:
    clip: VideoClip
    sample_id: str
    label: Optional[int] = None
    annotations: Optional[list[FrameAnnotation]] = None
    meta: dict = field(default_factory=dict)

    @property
    def is_labeled(self) -> bool:
        return self.label is not None and self.annotations is not None

    def unlabeled(self) -> "Sample":
        return Sample(clip=self.clip, sample_id=self.sample_id, meta=dict(self.meta))

    def gt_masks(self) -> np.ndarray:
        if self.annotations is None:
            raise ValueError(f"sample {self.sample_id} has no annotations")
        _, h, w, _ = self.clip.shape
        return np.stack([a.to_mask(h, w) for a in self.annotations])


@dataclass(frozen=True)
class ModelOutput:
    class_logits: np.ndarray  # K
    loc_map: LocalizationMap

    @property
    def class_distribution(self) -> ClassDistribution:
        return ClassDistribution.from_logits(self.class_logits)


def box_to_mask(box: Box, height: int, width: int) -> np.ndarray:
    """Rasterize a half-open box: pixel is on iff its center lies inside."""
    x0, y0, x1, y1 = box
    if not (x1 > x0 and y1 > y0):
        raise InvalidRegionError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise InvalidRegionError(f"box {box} outside {width}x{height} frame")
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    inside_x = (cx >= x0) & (cx < x1)
    inside_y = (cy >= y0) & (cy < y1)
    return inside_y[:, None] & inside_x[None, :]


def mask_to_box(mask: np.ndarray) -> Box:
    """Tightest half-open box enclosing every foreground pixel."""
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise InvalidRegionError("empty mask has no bounding box")
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def validate_sample(sample: Sample, num_classes: Optional[int] = None) -> list[str]:
    """Return every invariant violation of ``sample``; an empty list means valid."""
    problems: list[str] = []
    frames = np.asarray(sample.clip.frames)
    if frames.ndim != 4:
        problems.append(f"clip must be F x H x W x C, got shape {frames.shape}")
        return problems
    f, h, w, c = frames.shape
    if f < 2:
        problems.append(f"clip has {f} frames, need at least 2")
    if c not in (1, 3):
        problems.append(f"clip has {c} channels, expected 1 or 3")
    if not np.all(np.isfinite(frames)):
        problems.append("clip contains non-finite values")
    elif frames.size and (frames.min() < 0 or frames.max() > 1):
        problems.append("value out of range")

    if sample.label is None and sample.annotations is not None:
        problems.append("unlabeled carries annotations")
    if sample.label is not None and sample.annotations is None:
        problems.append("labeled sample missing annotations")
    if sample.label is not None and num_classes is not None and not 0 <= sample.label < num_classes:
        problems.append(f"label {sample.label} outside [0, {num_classes})")

    if sample.annotations is not None:
        if len(sample.annotations) != f:
            problems.append(f"{len(sample.annotations)} annotations for {f} frames")
        for i, ann in enumerate(sample.annotations):
            if ann.box is not None:
                x0, y0, x1, y1 = ann.box
                if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                    problems.append(f"frame {i}: box {ann.box} invalid for {w}x{h}")
            if ann.mask is not None:
                m = np.asarray(ann.mask)
                if m.shape != (h, w):
                    problems.append(f"frame {i}: mask shape {m.shape} != {(h, w)}")
                elif not m.any():
                    problems.append(f"frame {i}: mask has no foreground")
    return problems
