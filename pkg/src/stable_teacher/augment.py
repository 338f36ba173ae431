"""Weak/strong view generation for a clip.

Temporal selection runs first and is shared by both views and the annotations;
then the spatial pipelines run on the selected frames only. The geometric part
(horizontal flip, optional crop) is drawn once and shared so the teacher's and
the student's localization maps stay pixel-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .types import FrameAnnotation, Sample, VideoClip, mask_to_box

TEMPORAL_STRATEGIES = ("contiguous", "stride2", "repeat_pad")


@dataclass(frozen=True)
class TemporalSelection:
    indices: tuple[int, ...]
    strategy: str


@dataclass(frozen=True)
class GeomTransform:
    hflip: bool = False
    # (top, left, height, width) of a crop resized back to full frame; None = no crop
    crop: Optional[tuple[int, int, int, int]] = None


@dataclass
class StrongAugConfig:
    """Probabilities and ranges of the photometric pipeline, applied in field order."""

    contrast_p: float = 0.7
    contrast_range: tuple[float, float] = (0.6, 1.4)
    hue_p: float = 0.7
    hue_range: tuple[float, float] = (-0.1, 0.1)
    brightness_p: float = 0.7
    brightness_range: tuple[float, float] = (0.6, 1.4)
    saturation_p: float = 0.7
    saturation_range: tuple[float, float] = (0.6, 1.4)
    grayscale_p: float = 0.6
    blur_p: float = 0.5
    blur_kernel: int = 3
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)


@dataclass
class AugmentConfig:
    clip_len: int = 8
    hflip_p: float = 0.5
    crop_enabled: bool = False
    crop_scale: tuple[float, float] = (0.8, 1.0)
    strong: StrongAugConfig = field(default_factory=StrongAugConfig)


@dataclass
class ViewPair:
    weak: VideoClip
    strong: VideoClip
    geom: GeomTransform
    temporal: TemporalSelection
    annotations_t: Optional[list[FrameAnnotation]] = None
    label: Optional[int] = None
    sample_id: str = ""


def sample_temporal(F: int, T: int, rng: np.random.Generator,
                    strategy: Optional[str] = None) -> TemporalSelection:
    """Pick ``T`` non-decreasing frame indices from a clip of ``F`` frames.

    One of three strategies is drawn uniformly unless ``strategy`` is given:
    a contiguous window, a stride-2 window, or a window padded by repeating
    boundary frames. The first two fall back to padding when ``T > F``.
    """
    if F < 2:
        raise ValueError(f"need at least 2 source frames, got {F}")
    if T < 2:
        raise ValueError(f"clip length must be at least 2, got {T}")
    if strategy is None:
        strategy = TEMPORAL_STRATEGIES[int(rng.integers(3))]
    elif strategy not in TEMPORAL_STRATEGIES:
        raise ValueError(f"unknown temporal strategy {strategy!r}")

    if T > F and strategy != "repeat_pad":
        strategy = "repeat_pad"

    if strategy == "contiguous":
        start = int(rng.integers(F - T + 1))
        idx = np.arange(start, start + T)
    elif strategy == "stride2":
        span = 2 * (T - 1) + 1
        start = int(rng.integers(max(F - span, 0) + 1))
        idx = np.minimum(start + 2 * np.arange(T), F - 1)
    else:
        if F >= T:
            start = int(rng.integers(F - T + 1))
            idx = np.arange(start, start + T)
        else:
            left = (T - F) // 2
            idx = np.clip(np.arange(T) - left, 0, F - 1)
    return TemporalSelection(indices=tuple(int(i) for i in idx), strategy=strategy)


def sample_geom(height: int, width: int, rng: np.random.Generator,
                config: Optional[AugmentConfig] = None) -> GeomTransform:
    config = config or AugmentConfig()
    hflip = bool(rng.random() < config.hflip_p)
    crop = None
    if config.crop_enabled:
        scale = rng.uniform(*config.crop_scale)
        ch, cw = max(2, int(round(height * scale))), max(2, int(round(width * scale)))
        top = int(rng.integers(height - ch + 1))
        left = int(rng.integers(width - cw + 1))
        crop = (top, left, ch, cw)
    return GeomTransform(hflip=hflip, crop=crop)


def _apply_crop(frames: np.ndarray, crop) -> np.ndarray:
    top, left, ch, cw = crop
    _, h, w, _ = frames.shape
    patch = frames[:, top:top + ch, left:left + cw]
    return ndimage.zoom(patch, (1, h / ch, w / cw, 1), order=1, grid_mode=True, mode="nearest")


def apply_geom(frames: np.ndarray, geom: GeomTransform) -> np.ndarray:
    if geom.crop is not None:
        frames = _apply_crop(frames, geom.crop)
    if geom.hflip:
        frames = frames[:, :, ::-1]
    return np.ascontiguousarray(frames)


def apply_weak(clip: VideoClip, geom: GeomTransform) -> VideoClip:
    return VideoClip(apply_geom(clip.frames, geom), clip.frame_rate_hint)


def _gray(frames: np.ndarray) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames[..., 0]
    return frames[..., 0] * 0.299 + frames[..., 1] * 0.587 + frames[..., 2] * 0.114


def _blend(a: np.ndarray, b, factor: float) -> np.ndarray:
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0)


def adjust_contrast(frames: np.ndarray, factor: float) -> np.ndarray:
    mean = _gray(frames).mean(axis=(1, 2))[:, None, None, None]
    return _blend(frames, mean, factor)


def adjust_brightness(frames: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(frames * factor, 0.0, 1.0)


def adjust_saturation(frames: np.ndarray, factor: float) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames
    return _blend(frames, _gray(frames)[..., None], factor)


def adjust_hue(frames: np.ndarray, shift: float) -> np.ndarray:
    if frames.shape[-1] == 1:
        return frames
    hsv = rgb_to_hsv(frames)
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def to_grayscale(frames: np.ndarray) -> np.ndarray:
    g = _gray(frames)[..., None]
    return np.repeat(g, frames.shape[-1], axis=-1)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k1 = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k1 /= k1.sum()
    return np.outer(k1, k1)


def gaussian_blur(frames: np.ndarray, sigma: float, size: int = 3) -> np.ndarray:
    k = gaussian_kernel(size, sigma)[None, :, :, None]
    return ndimage.convolve(frames, k, mode="reflect")


def apply_strong(clip: VideoClip, geom: GeomTransform, rng: np.random.Generator,
                 config: Optional[StrongAugConfig] = None) -> VideoClip:
    """Photometric jitter, grayscale and blur, then the shared geometric transform.

    Every random decision is drawn once per clip so all frames receive the same
    perturbation.
    """
    c = config or StrongAugConfig()
    x = np.asarray(clip.frames, dtype=np.float64)
    if rng.random() < c.contrast_p:
        x = adjust_contrast(x, rng.uniform(*c.contrast_range))
    if rng.random() < c.hue_p:
        x = adjust_hue(x, rng.uniform(*c.hue_range))
    if rng.random() < c.brightness_p:
        x = adjust_brightness(x, rng.uniform(*c.brightness_range))
    if rng.random() < c.saturation_p:
        x = adjust_saturation(x, rng.uniform(*c.saturation_range))
    if rng.random() < c.grayscale_p:
        x = to_grayscale(x)
    if rng.random() < c.blur_p:
        x = gaussian_blur(x, rng.uniform(*c.blur_sigma_range), c.blur_kernel)
    x = np.clip(x, 0.0, 1.0).astype(clip.frames.dtype, copy=False)
    return VideoClip(apply_geom(x, geom), clip.frame_rate_hint)


def transform_annotation(ann: FrameAnnotation, geom: GeomTransform,
                         height: int, width: int) -> FrameAnnotation:
    if not ann.present:
        return ann
    if geom.crop is not None:
        mask = ann.to_mask(height, width)[None, :, :, None].astype(np.float64)
        mask = _apply_crop(mask, geom.crop)[0, :, :, 0] > 0.5
        if not mask.any():
            return FrameAnnotation.absent()
        ann = FrameAnnotation(box=mask_to_box(mask), mask=mask)
    return ann.hflip(width) if geom.hflip else ann


def make_view_pair(sample: Sample, T: int, rng: np.random.Generator,
                   config: Optional[AugmentConfig] = None) -> ViewPair:
    config = config or AugmentConfig(clip_len=T)
    frames = sample.clip.frames
    F, H, W, _ = frames.shape
    temporal = sample_temporal(F, T, rng)
    geom = sample_geom(H, W, rng, config)
    selected = VideoClip(frames[list(temporal.indices)], sample.clip.frame_rate_hint)

    annotations_t = None
    if sample.annotations is not None:
        annotations_t = [transform_annotation(sample.annotations[i], geom, H, W)
                         for i in temporal.indices]

    weak = apply_weak(selected, geom)
    strong = apply_strong(selected, geom, rng, config.strong)
    return ViewPair(weak=weak, strong=strong, geom=geom, temporal=temporal,
                    annotations_t=annotations_t, label=sample.label,
                    sample_id=sample.sample_id)
