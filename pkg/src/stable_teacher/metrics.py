"""Spatio-temporal detection scoring: frame mAP, video (tube) mAP, coherence.

Detections are matched greedily in descending score order (ties broken by
sample id) to the highest-IoU unmatched ground truth sharing the same key,
with IoU strictly above the threshold. AP is the area under the all-points
interpolated precision/recall curve.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .types import FrameAnnotation, ModelOutput, Sample, box_to_mask, mask_to_box

REPORT_THRESHOLDS = (0.2, 0.3, 0.4, 0.5, 0.6)
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_FORMAT = "stable-teacher-eval/1"


@dataclass
class DetectionTube:
    sample_id: str
    class_id: int
    score: float
    regions: list[FrameAnnotation]
    frame_size: Optional[tuple[int, int]] = None  # (height, width)

    @property
    def is_empty(self) -> bool:
        return not any(r.present for r in self.regions)

    @classmethod
    def from_sample(cls, sample: Sample, score: float = 1.0) -> "DetectionTube":
        """Ground-truth tube of a labeled sample."""
        _, h, w, _ = sample.clip.shape
        return cls(sample.sample_id, int(sample.label), score, list(sample.annotations), (h, w))


@dataclass(frozen=True)
class Detection:
    key: Hashable
    score: float
    region: Any
    tiebreak: str = ""


@dataclass(frozen=True)
class GroundTruth:
    key: Hashable
    region: Any


def extract_tube(output: ModelOutput, binarize_thresh: float = 0.5,
                 sample_id: str = "") -> DetectionTube:
    """Largest connected foreground blob per frame, scored by the top class probability."""
    dist = output.class_distribution
    maps = np.asarray(output.loc_map.values)
    regions = []
    for frame in maps:
        fg = frame > binarize_thresh
        labels, n = ndimage.label(fg)
        if n == 0:
            regions.append(FrameAnnotation.absent())
            continue
        sizes = np.bincount(labels.ravel())[1:]
        blob = labels == (int(np.argmax(sizes)) + 1)
        regions.append(FrameAnnotation(box=mask_to_box(blob), mask=blob))
    return DetectionTube(sample_id, dist.top_class, float(dist.probs[dist.top_class]),
                         regions, tuple(maps.shape[1:]))


# detection exchange (one JSON record per video) ----------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattened mask, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat.size and flat[0] else runs


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != shape[0] * shape[1]:
        raise ValueError(f"run lengths cover {flat.size} pixels, expected {shape[0] * shape[1]}")
    return flat.reshape(shape)


def tube_to_record(tube: DetectionTube, with_masks: bool = False) -> dict:
    frames = []
    for i, r in enumerate(tube.regions):
        if not r.present:
            continue
        rec = {"index": i, "box": [int(v) if float(v).is_integer() else float(v) for v in _box_of(r)]}
        if with_masks and r.mask is not None:
            rec["mask_rle"] = rle_encode(r.mask)
        frames.append(rec)
    out = {"sample_id": tube.sample_id, "class_id": int(tube.class_id), "score": float(tube.score),
           "num_frames": len(tube.regions), "frames": frames}
    if tube.frame_size:
        out["frame_size"] = list(tube.frame_size)
    return out


def tube_from_record(rec: dict) -> DetectionTube:
    size = tuple(rec["frame_size"]) if rec.get("frame_size") else None
    n = rec.get("num_frames", max((f["index"] for f in rec["frames"]), default=-1) + 1)
    regions = [FrameAnnotation.absent() for _ in range(n)]
    for f in rec["frames"]:
        mask = rle_decode(f["mask_rle"], size) if "mask_rle" in f and size else None
        regions[f["index"]] = FrameAnnotation(box=tuple(f["box"]), mask=mask)
    return DetectionTube(rec["sample_id"], int(rec["class_id"]), float(rec["score"]), regions, size)


def write_detections(tubes: Iterable[DetectionTube], path, with_masks: bool = False) -> None:
    with open(path, "w") as fh:
        for t in tubes:
            fh.write(json.dumps(tube_to_record(t, with_masks), sort_keys=True) + "\n")


def read_detections(path) -> list[DetectionTube]:
    with open(path) as fh:
        return [tube_from_record(json.loads(line)) for line in fh if line.strip()]


def _box_of(a: FrameAnnotation):
    if a.box is not None:
        return a.box
    return mask_to_box(a.mask)


def _mask_of(a: FrameAnnotation, size):
    if a.mask is not None:
        return np.asarray(a.mask, dtype=bool)
    if size is None:
        raise ValueError("mask-mode IoU of a box annotation needs the frame size")
    return box_to_mask(a.box, *size)


def _box_area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def frame_overlap(a: FrameAnnotation, b: FrameAnnotation, mode: str = "box",
                  size: Optional[tuple[int, int]] = None) -> tuple[float, float]:
    """(intersection, union) areas of two present regions."""
    if mode == "box":
        ba, bb = _box_of(a), _box_of(b)
        iw = min(ba[2], bb[2]) - max(ba[0], bb[0])
        ih = min(ba[3], bb[3]) - max(ba[1], bb[1])
        inter = max(0.0, iw) * max(0.0, ih)
        return inter, _box_area(ba) + _box_area(bb) - inter
    if mode == "mask":
        ma, mb = _mask_of(a, size), _mask_of(b, size)
        if ma.shape != mb.shape:
            raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
        return float(np.logical_and(ma, mb).sum()), float(np.logical_or(ma, mb).sum())
    raise ValueError(f"unknown IoU mode {mode!r}")


def _region_area(a: FrameAnnotation, mode: str, size) -> float:
    if mode == "box":
        return _box_area(_box_of(a))
    return float(_mask_of(a, size).sum())


def frame_iou(a: FrameAnnotation, b: FrameAnnotation, mode: str = "box",
              size: Optional[tuple[int, int]] = None) -> Optional[float]:
    """IoU of two frame regions; None when both are absent (frame not scored)."""
    if not a.present and not b.present:
        return None
    if not (a.present and b.present):
        return 0.0
    inter, union = frame_overlap(a, b, mode, size)
    return inter / union if union > 0 else 0.0


def tube_iou_3d(pred: DetectionTube, gt: DetectionTube, mode: str = "box") -> float:
    """Summed per-frame intersections over summed per-frame unions."""
    if len(pred.regions) != len(gt.regions):
        raise ValueError("tubes must share a frame index space")
    size = gt.frame_size or pred.frame_size
    inter_sum = union_sum = 0.0
    for a, b in zip(pred.regions, gt.regions):
        if a.present and b.present:
            inter, union = frame_overlap(a, b, mode, size)
        elif a.present or b.present:
            inter, union = 0.0, _region_area(a if a.present else b, mode, size)
        else:
            continue
        inter_sum += inter
        union_sum += union
    return inter_sum / union_sum if union_sum > 0 else 0.0


def match_detections(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_fn: Callable[[Any, Any], float], thresh: float) -> np.ndarray:
    """Greedy matching; returns true-positive flags in ranked detection order."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].tiebreak, i))
    by_key: dict[Hashable, list[int]] = {}
    for j, g in enumerate(gts):
        by_key.setdefault(g.key, []).append(j)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(detections), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_j = thresh, -1
        for j in by_key.get(det.key, ()):
            if matched[j]:
                continue
            iou = iou_fn(det.region, gts[j].region)
            if iou is not None and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = True
    return tp


def ap_from_flags(tp: np.ndarray, num_gt: int) -> float:
    """All-points interpolated AP of ranked true-positive flags."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                      iou_fn: Callable[[Any, Any], float], thresh: float) -> float:
    """AP of one class; NaN when the class has no ground truth."""
    if not gts:
        return float("nan")
    return ap_from_flags(match_detections(detections, gts, iou_fn, thresh), len(gts))


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _class_ids(preds: Sequence[DetectionTube], gts: Sequence[DetectionTube]) -> list[int]:
    return sorted({t.class_id for t in gts} | {t.class_id for t in preds})


def f_map(predictions: Sequence[DetectionTube], ground_truths: Sequence[DetectionTube],
          thresh: float, mode: str = "box") -> tuple[dict[int, float], float]:
    """Frame-level mAP: per-frame detections pooled per class."""
    size = next((t.frame_size for t in ground_truths if t.frame_size), None)

    def iou(a, b):
        return frame_iou(a, b, mode, size)

    per_class = {}
    for c in _class_ids(predictions, ground_truths):
        dets = [Detection((t.sample_id, f), t.score, r, t.sample_id)
                for t in predictions if t.class_id == c
                for f, r in enumerate(t.regions) if r.present]
        gts = [GroundTruth((t.sample_id, f), r)
               for t in ground_truths if t.class_id == c
               for f, r in enumerate(t.regions) if r.present]
        per_class[c] = average_precision(dets, gts, iou, thresh)
    return per_class, _nanmean(per_class.values())


def v_map(predictions: Sequence[DetectionTube], ground_truths: Sequence[DetectionTube],
          thresh: float, mode: str = "box") -> tuple[dict[int, float], float]:
    """Video-level mAP: one tube per video and class, matched by 3D IoU."""

    def iou(a, b):
        return tube_iou_3d(a, b, mode)

    per_class = {}
    for c in _class_ids(predictions, ground_truths):
        dets = [Detection(t.sample_id, t.score, t, t.sample_id)
                for t in predictions if t.class_id == c]
        gts = [GroundTruth(t.sample_id, t) for t in ground_truths if t.class_id == c]
        per_class[c] = average_precision(dets, gts, iou, thresh)
    return per_class, _nanmean(per_class.values())


def coherence_score(loc_map: np.ndarray) -> float:
    """Mean absolute frame-to-frame change of a map; lower is smoother."""
    m = np.asarray(loc_map, dtype=np.float64)
    if m.ndim < 3 or m.shape[-3] < 2:
        raise ValueError("coherence needs at least 2 frames")
    return float(np.abs(np.diff(m, axis=-3)).mean())


@dataclass
class EvalReport:
    class_names: list[str]
    class_background: dict[int, str]
    f_ap: dict[str, dict[int, float]] = field(default_factory=dict)
    v_ap: dict[str, dict[int, float]] = field(default_factory=dict)
    coherence: float = float("nan")
    mode: str = "box"

    @staticmethod
    def threshold_keys() -> list[str]:
        return [f"{t:.1f}" for t in REPORT_THRESHOLDS] + ["0.5:0.95"]

    def mean(self, kind: str, key: str, background: Optional[str] = None) -> float:
        table = (self.f_ap if kind == "f" else self.v_ap)[key]
        return _nanmean(v for c, v in table.items()
                        if background is None or self.class_background.get(c) == background)

    def summary(self) -> dict[str, float]:
        out = {}
        for kind in ("f", "v"):
            for key in self.threshold_keys():
                out[f"{kind}-mAP@{key}"] = self.mean(kind, key)
        out["coherence"] = self.coherence
        return out

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or np.isnan(x) else round(float(x), 6)

        backgrounds = sorted(set(self.class_background.values()))
        tables = {}
        for kind, data in (("f-mAP", self.f_ap), ("v-mAP", self.v_ap)):
            k = kind[0]
            tables[kind] = {
                key: {
                    "per_class": {self.class_names[c]: clean(v) for c, v in sorted(data[key].items())},
                    "mean": clean(self.mean(k, key)),
                    "by_background": {b: clean(self.mean(k, key, b)) for b in backgrounds},
                }
                for key in self.threshold_keys()
            }
        return {
            "format": REPORT_FORMAT,
            "iou_mode": self.mode,
            "thresholds": self.threshold_keys(),
            "classes": [{"id": i, "name": n, "background": self.class_background.get(i)}
                        for i, n in enumerate(self.class_names)],
            **tables,
            "coherence": clean(self.coherence),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        d = self.to_dict()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "threshold", "row"] + [n for n in self.class_names] + ["mean"])
        for kind in ("f-mAP", "v-mAP"):
            for key in self.threshold_keys():
                entry = d[kind][key]
                row = [entry["per_class"].get(n) for n in self.class_names]
                w.writerow([kind, key, "all"] + ["" if v is None else v for v in row]
                           + ["" if entry["mean"] is None else entry["mean"]])
                for b, v in entry["by_background"].items():
                    w.writerow([kind, key, b] + [""] * len(self.class_names) + ["" if v is None else v])
        w.writerow(["coherence", "", "all"] + [""] * len(self.class_names)
                   + ["" if d["coherence"] is None else d["coherence"]])
        return buf.getvalue()


def evaluate_tubes(predictions: Sequence[DetectionTube], ground_truths: Sequence[DetectionTube],
                   class_names: Sequence[str], class_background: dict[int, str],
                   mode: str = "box", coherence: float = float("nan")) -> EvalReport:
    report = EvalReport(list(class_names), dict(class_background), coherence=coherence, mode=mode)
    all_ids = range(len(class_names))
    for name, fn, target in (("f", f_map, report.f_ap), ("v", v_map, report.v_ap)):
        for t in REPORT_THRESHOLDS:
            per_class, _ = fn(predictions, ground_truths, t, mode)
            target[f"{t:.1f}"] = {c: per_class.get(c, float("nan")) for c in all_ids}
        sweep = [fn(predictions, ground_truths, t, mode)[0] for t in COCO_THRESHOLDS]
        target["0.5:0.95"] = {c: _nanmean_all([s.get(c, float("nan")) for s in sweep]) for c in all_ids}
    return report


def _nanmean_all(values: list[float]) -> float:
    # a class without ground truth is NaN at every threshold
    return float("nan") if any(np.isnan(v) for v in values) else float(np.mean(values))


def evaluate_outputs(outputs: Sequence[tuple[str, ModelOutput]], samples: Sequence[Sample],
                     class_names: Sequence[str], class_background: dict[int, str],
                     mode: str = "box", binarize_thresh: float = 0.5) -> EvalReport:
    """Score model outputs against labeled samples (matched by sample id)."""
    preds = [extract_tube(out, binarize_thresh, sid) for sid, out in outputs]
    gts = [DetectionTube.from_sample(s) for s in samples]
    coh = float(np.mean([coherence_score(out.loc_map.values) for _, out in outputs])) if outputs else float("nan")
    return evaluate_tubes(preds, gts, class_names, class_background, mode, coh)
