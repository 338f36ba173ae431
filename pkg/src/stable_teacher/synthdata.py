"""Moving-shapes video benchmark with exact per-frame masks and boxes.

A class is a (shape, motion) pair. Each clip renders one hard-edged shape
moving over either a fixed texture (static scene) or a scrolling texture
(dynamic scene), plus Gaussian pixel noise. Positions that would leave the
frame are reflected back at the borders.

On disk a dataset is a directory with ``dataset.json`` and one sub-directory
per clip holding ``frames.npy`` (F x H x W x C float32), ``masks.npy``
(F x H x W bool) and ``meta.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .types import FrameAnnotation, Sample, VideoClip, mask_to_box

DATASET_FORMAT = "stable-teacher-dataset/1"
SPLIT_FORMAT = "stable-teacher-split/1"

SHAPES = ("rectangle", "disc", "triangle")
MOTIONS = ("linear", "circular", "zigzag")
SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    shapes: tuple[str, ...] = ("rectangle", "disc", "triangle")
    motions: tuple[str, ...] = ("linear", "circular")
    train_per_class: int = 60
    val_per_class: int = 10
    test_per_class: int = 20
    num_frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    background: str = "mixed"  # static | dynamic | mixed
    noise: float = 0.05
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.shapes) * len(self.motions)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_frames < 8:
            raise ValueError("num_frames must be at least 8")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        for m in self.motions:
            if m not in MOTIONS:
                raise ValueError(f"unknown motion {m!r}")
        if self.background not in ("static", "dynamic", "mixed"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if min(self.height, self.width) < 24:
            raise ValueError("frames must be at least 24x24 to fit the shapes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"], d["motions"] = list(self.shapes), list(self.motions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("shapes", "motions"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    shape: str
    motion: str
    background: str


def class_table(config: SynthConfig) -> list[ClassInfo]:
    """Enumerate classes; in mixed mode backgrounds alternate in a checkerboard
    over (shape, motion) so neither factor alone predicts the scene type."""
    out = []
    for si, s in enumerate(config.shapes):
        for mi, m in enumerate(config.motions):
            if config.background == "mixed":
                bg = "dynamic" if (si + mi) % 2 else "static"
            else:
                bg = config.background
            out.append(ClassInfo(len(out), f"{s}-{m}", s, m, bg))
    return out


# rendering ---------------------------------------------------------------

def _pixel_centers(h: int, w: int):
    return np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)


def rectangle_mask(x0: int, y0: int, rw: int, rh: int, h: int, w: int) -> np.ndarray:
    xs, ys = _pixel_centers(h, w)
    return (xs >= x0) & (xs < x0 + rw) & (ys >= y0) & (ys < y0 + rh)


def disc_mask(cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    xs, ys = _pixel_centers(h, w)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def triangle_vertices(cx: float, cy: float, base: float, height: float) -> np.ndarray:
    return np.array([[cx, cy - height / 2], [cx - base / 2, cy + height / 2],
                     [cx + base / 2, cy + height / 2]])


def triangle_mask(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    xs, ys = _pixel_centers(h, w)
    (x1, y1), (x2, y2), (x3, y3) = vertices

    def edge(ax, ay, bx, by):
        return (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)

    e1, e2, e3 = edge(x1, y1, x2, y2), edge(x2, y2, x3, y3), edge(x3, y3, x1, y1)
    return ((e1 >= 0) & (e2 >= 0) & (e3 >= 0)) | ((e1 <= 0) & (e2 <= 0) & (e3 <= 0))


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full_like(p, lo)
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


def trajectory(motion: str, n: int, lo: np.ndarray, hi: np.ndarray,
               rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Centers (n x 2, as x, y) of a motion pattern, reflected into [lo, hi]."""
    t = np.arange(n, dtype=np.float64)
    start = rng.uniform(lo, hi)
    if motion == "linear":
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(1.5, 2.5)
        vel = speed * np.array([math.cos(angle), math.sin(angle)])
        raw = start + t[:, None] * vel
        params = {"angle": angle, "speed": speed}
    elif motion == "circular":
        radius = rng.uniform(4.0, 7.0)
        omega = rng.choice([-1, 1]) * rng.uniform(0.6, 0.9)
        phase = rng.uniform(0, 2 * math.pi)
        ang = phase + omega * t
        raw = start + radius * np.stack([np.cos(ang) - math.cos(phase),
                                         np.sin(ang) - math.sin(phase)], axis=1)
        params = {"radius": radius, "omega": float(omega), "phase": phase}
    elif motion == "zigzag":
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(1.0, 2.0)
        amp = rng.uniform(2.0, 4.0)
        d = np.array([math.cos(angle), math.sin(angle)])
        perp = np.array([-d[1], d[0]])
        raw = start + t[:, None] * speed * d + (amp * (-1.0) ** t)[:, None] * perp
        params = {"angle": angle, "speed": speed, "amplitude": amp}
    else:
        raise ValueError(f"unknown motion {motion!r}")
    pos = np.stack([_reflect(raw[:, 0], lo[0], hi[0]), _reflect(raw[:, 1], lo[1], hi[1])], axis=1)
    return pos, params


def _texture(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(h // 4 + 2, w // 4 + 2, c))
    fine = ndimage.zoom(coarse, (4, 4, 1), order=1, grid_mode=True, mode="nearest")[:h, :w]
    lo, hi = rng.uniform(0.05, 0.3), rng.uniform(0.45, 0.7)
    return lo + (hi - lo) * fine


def render_clip(info: ClassInfo, config: SynthConfig, rng: np.random.Generator):
    """Render one clip; returns frames (F x H x W x C), masks (F x H x W) and metadata."""
    n, h, w, c = config.num_frames, config.height, config.width, config.channels
    if info.shape == "rectangle":
        rw, rh = int(rng.integers(6, 12)), int(rng.integers(6, 12))
        half = np.array([rw / 2, rh / 2])
        shape_params = {"width": rw, "height": rh}
    elif info.shape == "disc":
        r = float(rng.uniform(3.5, 6.0))
        half = np.array([r, r])
        shape_params = {"radius": r}
    else:
        base, th = float(rng.uniform(8.0, 13.0)), float(rng.uniform(8.0, 13.0))
        half = np.array([base / 2, th / 2])
        shape_params = {"base": base, "height": th}
    lo = half + 1.0
    hi = np.array([w, h]) - half - 1.0
    centers, motion_params = trajectory(info.motion, n, lo, hi, rng)

    masks = np.zeros((n, h, w), dtype=bool)
    for f, (cx, cy) in enumerate(centers):
        if info.shape == "rectangle":
            x0 = int(round(cx - shape_params["width"] / 2))
            y0 = int(round(cy - shape_params["height"] / 2))
            masks[f] = rectangle_mask(x0, y0, shape_params["width"], shape_params["height"], h, w)
        elif info.shape == "disc":
            masks[f] = disc_mask(cx, cy, shape_params["radius"], h, w)
        else:
            masks[f] = triangle_mask(triangle_vertices(cx, cy, shape_params["base"],
                                                       shape_params["height"]), h, w)

    pad = 4 * n
    canvas = _texture(rng, h + 2 * pad, w + 2 * pad, c)
    if info.background == "dynamic":
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(1.0, 3.0)
        shift = np.stack([np.round(speed * f * np.array([math.sin(angle), math.cos(angle)]))
                          for f in range(n)]).astype(int)
    else:
        shift = np.zeros((n, 2), dtype=int)
    color = rng.uniform(0.35, 1.0, size=c)

    frames = np.empty((n, h, w, c), dtype=np.float64)
    for f in range(n):
        dy, dx = pad + shift[f]
        bg = canvas[dy:dy + h, dx:dx + w]
        frames[f] = np.where(masks[f][..., None], color, bg)
    frames += rng.normal(0.0, config.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    meta = {
        "class_id": info.id, "class_name": info.name, "shape": info.shape,
        "motion": info.motion, "background": info.background,
        "shape_params": shape_params, "motion_params": motion_params,
        "centers": centers.round(4).tolist(), "color": color.round(4).tolist(),
        "boxes": [list(mask_to_box(m)) for m in masks],
    }
    return frames, masks, meta


def _clip_rng(seed: int, class_id: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, class_id, SPLITS.index(split), index])


def iter_clips(config: SynthConfig) -> Iterable[tuple[str, str, np.ndarray, np.ndarray, dict]]:
    """Yield ``(sample_id, split, frames, masks, meta)`` for every clip, in a fixed order."""
    config.validate()
    counts = {"train": config.train_per_class, "val": config.val_per_class,
              "test": config.test_per_class}
    for split in SPLITS:
        for info in class_table(config):
            for i in range(counts[split]):
                sid = f"{split}-c{info.id}-{i:04d}"
                frames, masks, meta = render_clip(info, config, _clip_rng(config.seed, info.id, split, i))
                meta["split"] = split
                meta["sample_id"] = sid
                yield sid, split, frames, masks, meta


def to_sample(sid: str, frames: np.ndarray, masks: np.ndarray, meta: dict) -> Sample:
    anns = [FrameAnnotation(box=tuple(b), mask=m) for b, m in zip(meta["boxes"], masks)]
    return Sample(clip=VideoClip(frames), sample_id=sid, label=int(meta["class_id"]),
                  annotations=anns, meta={"background": meta["background"],
                                          "split": meta.get("split")})


def generate_samples(config: SynthConfig) -> dict[str, Sample]:
    """In-memory dataset keyed by sample id (labels and masks attached)."""
    return {sid: to_sample(sid, fr, ms, meta) for sid, _, fr, ms, meta in iter_clips(config)}


def dataset_manifest(config: SynthConfig, clips: list[dict]) -> dict:
    return {
        "format": DATASET_FORMAT,
        "config": config.to_dict(),
        "classes": [asdict(c) for c in class_table(config)],
        "clips": clips,
    }


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write the dataset under ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = []
    for sid, split, frames, masks, meta in iter_clips(config):
        d = out / sid
        d.mkdir(exist_ok=True)
        np.save(d / "frames.npy", frames)
        np.save(d / "masks.npy", masks)
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
        clips.append({"id": sid, "class_id": meta["class_id"], "split": split,
                      "background": meta["background"]})
    manifest = dataset_manifest(config, clips)
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "dataset.json"
    manifest = json.loads(p.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{p}: unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_samples(root, ids: Optional[Iterable[str]] = None) -> dict[str, Sample]:
    root = Path(root)
    manifest = load_manifest(root)
    wanted = None if ids is None else set(ids)
    out = {}
    for clip in manifest["clips"]:
        sid = clip["id"]
        if wanted is not None and sid not in wanted:
            continue
        d = root / sid
        meta = json.loads((d / "meta.json").read_text())
        out[sid] = to_sample(sid, np.load(d / "frames.npy"), np.load(d / "masks.npy"), meta)
    return out


# splits ------------------------------------------------------------------

@dataclass
class SplitManifest:
    labeled: list[str]
    unlabeled: list[str]
    validation: list[str]
    test: list[str]
    percent_labeled: float
    seed: int
    format: str = SPLIT_FORMAT

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        if d.get("format") != SPLIT_FORMAT:
            raise ValueError(f"{path}: unsupported split format {d.get('format')!r}")
        return cls(**d)


def split_labeled_unlabeled(manifest: dict, percent: float, seed: int) -> SplitManifest:
    """Class-stratified labeled subset of the train clips.

    The labeled total is ``round(percent * N / 100)``, distributed over classes
    by largest remainder so the overall fraction is within one sample.
    """
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in (0, 100], got {percent}")
    train = sorted((c for c in manifest["clips"] if c["split"] == "train"), key=lambda c: c["id"])
    by_class: dict[int, list[str]] = {}
    for c in train:
        by_class.setdefault(int(c["class_id"]), []).append(c["id"])
    n_total = len(train)
    target = int(round(percent * n_total / 100))
    quota = {k: percent * len(v) / 100 for k, v in by_class.items()}
    take = {k: int(math.floor(q + 1e-9)) for k, q in quota.items()}
    leftovers = sorted(by_class, key=lambda k: (-(quota[k] - take[k]), k))
    for k in leftovers[: max(0, target - sum(take.values()))]:
        take[k] += 1
    empty = [k for k, n in take.items() if n == 0]
    if empty:
        raise ValueError(f"percent={percent} leaves classes {empty} without labeled samples")

    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for k in sorted(by_class):
        ids = by_class[k]
        perm = rng.permutation(len(ids))
        chosen = {ids[i] for i in perm[: take[k]]}
        labeled += [i for i in ids if i in chosen]
        unlabeled += [i for i in ids if i not in chosen]
    val = sorted(c["id"] for c in manifest["clips"] if c["split"] == "val")
    test = sorted(c["id"] for c in manifest["clips"] if c["split"] == "test")
    return SplitManifest(labeled, unlabeled, val, test, float(percent), int(seed))
