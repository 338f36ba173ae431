import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stable_teacher.metrics import (COCO_THRESHOLDS, Detection, DetectionTube, EvalReport,
                                    GroundTruth, ap_from_flags, average_precision, coherence_score,
                                    evaluate_tubes, extract_tube, f_map, frame_iou,
                                    read_detections, rle_decode, rle_encode, tube_iou_3d,
                                    v_map, write_detections)
from stable_teacher.types import FrameAnnotation, LocalizationMap, ModelOutput

GOLDEN = Path(__file__).parent / "golden"


def box(x0, y0, x1, y1):
    return FrameAnnotation(box=(x0, y0, x1, y1))


def mask_ann(m):
    return FrameAnnotation(mask=np.asarray(m, dtype=bool))


# oracles -------------------------------------------------------------------

def pixel_set(m):
    return {(r, c) for r, c in zip(*np.nonzero(m))}


def oracle_iou(a, b):
    sa, sb = pixel_set(a), pixel_set(b)
    return len(sa & sb) / len(sa | sb) if sa | sb else 0.0


def oracle_flags(dets, gts, iou, thresh):
    """Plain nested-loop greedy matcher over detections ranked by (-score, tiebreak)."""
    ranked = sorted(enumerate(dets), key=lambda p: (-p[1][1], p[1][2], p[0]))
    used = [False] * len(gts)
    flags = []
    for _, (key, score, _, region) in ranked:
        best, best_j = None, None
        for j, (gkey, greg) in enumerate(gts):
            if used[j] or gkey != key:
                continue
            v = iou(region, greg)
            if v > thresh and (best is None or v > best):
                best, best_j = v, j
        if best_j is not None:
            used[best_j] = True
        flags.append(best_j is not None)
    return flags


def oracle_ap(flags, num_gt):
    """Enumerate every recall level; interpolated precision = max precision at recall >= r."""
    if num_gt == 0:
        return float("nan")
    points = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        points.append((tp / num_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            p_interp = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * p_interp
            prev_r = r
    return ap


# extraction ------------------------------------------------------------------

def _output(maps, logits=(2.0, 0.0, 0.0)):
    return ModelOutput(np.array(logits, dtype=float), LocalizationMap(np.asarray(maps, dtype=float)))


def test_extract_tube_recovers_rectangles():
    maps = np.zeros((3, 10, 12))
    rects = [(1, 2, 5, 6), (2, 2, 6, 7), (3, 1, 9, 4)]
    for f, (x0, y0, x1, y1) in enumerate(rects):
        maps[f, y0:y1, x0:x1] = 0.9
    tube = extract_tube(_output(maps), sample_id="v")
    assert [r.box for r in tube.regions] == rects
    assert tube.class_id == 0
    assert tube.score == pytest.approx(math.exp(2) / (math.exp(2) + 2))


def test_extract_tube_empty_map():
    tube = extract_tube(_output(np.zeros((4, 6, 6))))
    assert tube.is_empty


def test_extract_tube_picks_largest_component():
    rng = np.random.default_rng(0)
    for _ in range(10):
        maps = np.zeros((2, 20, 20))
        # 30-pixel blob (5x6) and 10-pixel blob (2x5), placed apart
        y, x = rng.integers(0, 5), rng.integers(0, 4)
        maps[:, y:y + 5, x:x + 6] = 0.8
        maps[:, 15:17, 12:17] = 0.8
        if rng.random() < 0.5:
            maps = maps[:, ::-1].copy()
        tube = extract_tube(_output(maps))
        for r in tube.regions:
            assert r.mask.sum() == 30


def test_extract_tube_logit_scaling_keeps_class():
    rng = np.random.default_rng(1)
    maps = np.zeros((2, 6, 6))
    maps[:, 1:3, 1:3] = 1
    for _ in range(20):
        logits = rng.normal(size=5)
        ids = {extract_tube(_output(maps, logits * s)).class_id for s in (0.1, 1.0, 7.0)}
        assert len(ids) == 1


# IoU ---------------------------------------------------------------------------

def test_frame_iou_boxes():
    assert frame_iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0
    assert frame_iou(box(0, 0, 10, 10), box(0, 0, 10, 5)) == 0.5
    assert frame_iou(FrameAnnotation.absent(), box(0, 0, 2, 2)) == 0.0
    assert frame_iou(FrameAnnotation.absent(), FrameAnnotation.absent()) is None


def test_frame_iou_masks_match_pixel_set_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.random((7, 9)) < 0.3
        b = rng.random((7, 9)) < 0.3
        a[0, 0] = True
        assert frame_iou(mask_ann(a), mask_ann(b), mode="mask") == oracle_iou(a, b)


def test_frame_iou_mode_conversion():
    assert frame_iou(box(0, 0, 4, 4), mask_ann(np.ones((4, 4))), mode="mask", size=(4, 4)) == 1.0
    with pytest.raises(ValueError):
        frame_iou(box(0, 0, 4, 4), box(0, 0, 2, 2), mode="mask")


@settings(max_examples=60)
@given(st.lists(st.integers(0, 12), min_size=8, max_size=8))
def test_iou_symmetry(c):
    a = box(min(c[0], c[1]), min(c[2], c[3]), max(c[0], c[1]) + 1, max(c[2], c[3]) + 1)
    b = box(min(c[4], c[5]), min(c[6], c[7]), max(c[4], c[5]) + 1, max(c[6], c[7]) + 1)
    assert frame_iou(a, b) == frame_iou(b, a)
    ta = DetectionTube("v", 0, 1.0, [a, FrameAnnotation.absent(), b])
    tb = DetectionTube("v", 0, 1.0, [b, b, FrameAnnotation.absent()])
    assert tube_iou_3d(ta, tb) == tube_iou_3d(tb, ta)


def test_tube_iou_cases():
    A = FrameAnnotation.absent()
    t = DetectionTube("v", 0, 1.0, [box(0, 0, 4, 4), box(1, 1, 5, 5), A])
    assert tube_iou_3d(t, t) == 1.0
    early = DetectionTube("v", 0, 1.0, [box(0, 0, 4, 4), A, A, A])
    late = DetectionTube("v", 0, 1.0, [A, A, box(0, 0, 4, 4), box(0, 0, 4, 4)])
    assert tube_iou_3d(early, late) == 0.0


def test_tube_iou_frame_summation_oracle():
    # half the frames overlap at IoU 0.5 (box 10x10 vs 10x5); the rest are present only in gt
    A = FrameAnnotation.absent()
    gt = DetectionTube("v", 0, 1.0, [box(0, 0, 10, 10)] * 4)
    pred = DetectionTube("v", 0, 1.0, [box(0, 0, 10, 5)] * 2 + [A, A])
    inter = 50 + 50 + 0 + 0
    union = 100 + 100 + 100 + 100
    assert tube_iou_3d(pred, gt) == inter / union


# AP ----------------------------------------------------------------------------

def test_ap_trivial_cases():
    gts = [GroundTruth(i, box(0, 0, 2, 2)) for i in range(3)]
    dets = [Detection(i, 0.9, box(0, 0, 2, 2), str(i)) for i in range(3)]
    assert average_precision(dets, gts, frame_iou, 0.5) == 1.0
    assert average_precision([], gts, frame_iou, 0.5) == 0.0
    assert math.isnan(average_precision(dets, [], frame_iou, 0.5))


def test_ap_from_flags_known_value():
    # recall 0.5 at precision 1, recall 0.75 at precision 0.75
    assert ap_from_flags(np.array([1, 1, 0, 1, 0, 0], bool), 4) == pytest.approx(0.5 + 0.25 * 0.75)


def test_ap_matches_exhaustive_oracle():
    """Every small case: <=5 detections, <=3 gts on shared keys, random boxes/scores."""
    rng = np.random.default_rng(3)
    count = 0
    for n_det, n_gt in itertools.product(range(0, 6), range(1, 4)):
        for _ in range(15):
            gts = []
            for j in range(n_gt):
                x, y = rng.integers(0, 6, 2)
                gts.append((int(rng.integers(0, 2)), box(x, y, x + 4, y + 4)))
            dets = []
            for i in range(n_det):
                x, y = rng.integers(0, 6, 2)
                score = float(rng.choice([0.2, 0.5, 0.7, 0.9]))  # ties exercise the tiebreak
                dets.append((int(rng.integers(0, 2)), score, f"s{rng.integers(0, 3)}", box(x, y, x + 4, y + 4)))
            for thresh in (0.1, 0.3, 0.5):
                got = average_precision([Detection(k, s, r, tb) for k, s, tb, r in dets],
                                        [GroundTruth(k, r) for k, r in gts], frame_iou, thresh)
                expect = oracle_ap(oracle_flags(dets, gts, frame_iou, thresh), len(gts))
                assert got == pytest.approx(expect, abs=1e-9)
                count += 1
    assert count > 500


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gts = [GroundTruth(k, box(*(lambda x, y: (x, y, x + 5, y + 5))(*rng.integers(0, 8, 2)))) for k in range(4)]
    dets = [Detection(int(rng.integers(0, 4)), float(rng.random()),
                      box(*(lambda x, y: (x, y, x + 5, y + 5))(*rng.integers(0, 8, 2))), "") for _ in range(6)]
    aps = [average_precision(dets, gts, frame_iou, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


# f-mAP / v-mAP -------------------------------------------------------------------

def _gt_tubes():
    A = FrameAnnotation.absent()
    tubes = []
    for v in range(6):
        c = v % 3
        regions = [box(v, 2, v + 6, 8), box(v + 1, 2, v + 7, 8), A, box(v + 2, 3, v + 8, 9)]
        tubes.append(DetectionTube(f"vid{v}", c, 1.0, regions, (12, 16)))
    return tubes


def test_ground_truth_self_evaluation_is_perfect():
    gts = _gt_tubes()
    for t in (0.2, 0.5, 0.75, 0.95):
        assert f_map(gts, gts, t)[1] == 1.0
        assert v_map(gts, gts, t)[1] == 1.0
        assert f_map(gts, gts, t, mode="mask")[1] == 1.0


def test_threshold_gate():
    gts = _gt_tubes()
    # shrink every box to 6x2 of the 6x6 gt -> IoU 1/3 on every frame
    shifted = [DetectionTube(t.sample_id, t.class_id, 0.9,
                             [FrameAnnotation(box=(r.box[0], r.box[1], r.box[2], r.box[1] + 2)) if r.present else r
                              for r in t.regions]) for t in gts]
    assert v_map(shifted, gts, 0.2)[1] == 1.0
    assert v_map(shifted, gts, 0.5)[1] == 0.0
    assert f_map(shifted, gts, 0.2)[1] == 1.0
    assert f_map(shifted, gts, 0.5)[1] == 0.0


def test_v_map_matches_enumeration_oracle():
    """3 classes, 6 videos: per class, enumerate detections in ranked order and match by brute force."""
    gts = _gt_tubes()
    rng = np.random.default_rng(4)
    A = FrameAnnotation.absent()
    preds = []
    for t in gts:
        for _ in range(2):
            c = int(rng.integers(0, 3))
            jitter = int(rng.integers(-2, 3))
            regions = [box(max(0, r.box[0] + jitter), r.box[1], r.box[2] + jitter, r.box[3]) if r.present and rng.random() < 0.8 else A
                       for r in t.regions]
            preds.append(DetectionTube(t.sample_id, c, float(rng.random()), regions, (12, 16)))
    for thresh in (0.2, 0.4, 0.5):
        per_class, mean = v_map(preds, gts, thresh)
        aps = []
        for c in range(3):
            d = [(p.sample_id, p.score, p.sample_id, p) for p in preds if p.class_id == c]
            g = [(t.sample_id, t) for t in gts if t.class_id == c]
            aps.append(oracle_ap(oracle_flags(d, g, tube_iou_3d, thresh), len(g)))
            assert per_class[c] == pytest.approx(aps[-1], abs=1e-9)
        assert mean == pytest.approx(np.mean(aps), abs=1e-9)


def test_class_without_ground_truth_is_excluded():
    gts = [t for t in _gt_tubes() if t.class_id != 2]
    preds = _gt_tubes()
    per_class, mean = f_map(preds, gts, 0.5)
    assert math.isnan(per_class[2])
    assert mean == 1.0


# coherence --------------------------------------------------------------------

def test_coherence_score():
    assert coherence_score(np.full((5, 4, 4), 0.3)) == 0.0
    alt = np.zeros((6, 3, 3))
    alt[1::2] = 1
    assert coherence_score(alt) == 1.0
    m = np.random.default_rng(5).random((4, 8, 8))
    loop = sum(abs(m[f + 1, r, c] - m[f, r, c]) for f in range(3) for r in range(8) for c in range(8)) / (3 * 64)
    assert coherence_score(m) == pytest.approx(loop, abs=1e-9)
    with pytest.raises(ValueError):
        coherence_score(np.zeros((1, 3, 3)))


# report -----------------------------------------------------------------------

def _report():
    gts = _gt_tubes()
    preds = [t for t in gts if t.sample_id != "vid5"]  # class 2 loses one of two videos
    return evaluate_tubes(preds, gts, ["a", "b", "c"], {0: "static", 1: "dynamic", 2: "dynamic"},
                          coherence=0.125)


def test_report_static_dynamic_rows():
    rep = _report()
    d = rep.to_dict()
    row = d["v-mAP"]["0.5"]
    assert set(row["by_background"]) == {"static", "dynamic"}
    assert row["by_background"]["static"] == 1.0
    assert row["by_background"]["dynamic"] == pytest.approx((1.0 + 0.5) / 2)
    assert set(d["f-mAP"]) == {"0.2", "0.3", "0.4", "0.5", "0.6", "0.5:0.95"}
    assert rep.summary()["v-mAP@0.2"] == pytest.approx((1 + 1 + 0.5) / 3)


def test_report_golden_files():
    rep = _report()
    assert rep.to_json() == (GOLDEN / "eval_report.json").read_text()
    assert rep.to_csv() == (GOLDEN / "eval_report.csv").read_text()
    json.loads(rep.to_json())


# detection exchange --------------------------------------------------------------

@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(0, 10_000))
def test_rle_round_trip(h, w, seed):
    m = np.random.default_rng(seed).random((h, w)) < 0.4
    runs = rle_encode(m)
    assert sum(runs) == h * w
    assert np.array_equal(rle_decode(runs, (h, w)), m)


def test_rle_known_value():
    assert rle_encode(np.array([[0, 1, 1], [1, 0, 0]], bool)) == [1, 3, 2]
    assert rle_encode(np.array([[1, 0]], bool)) == [0, 1, 1]


def test_detections_file_round_trip(tmp_path):
    maps = np.zeros((3, 10, 12))
    maps[0, 2:5, 1:6] = 0.9
    maps[2, 4:8, 3:5] = 0.9
    tube = extract_tube(_output(maps), sample_id="vid")
    write_detections([tube, tube], tmp_path / "d.jsonl", with_masks=True)
    back = read_detections(tmp_path / "d.jsonl")
    assert len(back) == 2
    assert [r.present for r in back[0].regions] == [True, False, True]
    assert [r.box for r in back[0].regions if r.present] == [(1, 2, 6, 5), (3, 4, 5, 8)]
    assert np.array_equal(back[0].regions[2].mask, tube.regions[2].mask)
    assert tube_iou_3d(back[0], tube, mode="mask") == 1.0
