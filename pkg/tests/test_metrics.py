import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgglab import oracle
from sgglab.core import BoundingBox, Detection, ImageRecord, RelationTriplet, SceneGraph, ScoredRelation
from sgglab.metrics import (
    EmptyEvaluationError,
    MetricReport,
    average_precision_per_class,
    f1_at_k,
    iou,
    iou_matrix,
    map50,
    match_triplets,
    mean_recall_at_k,
    per_predicate_recall,
    recall_at_k,
    report_from_results,
)

from conftest import random_box, random_fixture


def _perfect_graph(rec, preds=None):
    dets = [Detection(b, c, 1.0) for b, c in zip(rec.gt_boxes, rec.gt_classes)]
    rels = [
        ScoredRelation.build(t.subj_idx, t.obj_idx, dets[t.subj_idx], dets[t.obj_idx],
                             t.pred_id if preds is None else preds(t), 1.0)
        for t in rec.gt_relations
    ]
    return SceneGraph.build(rec.image_id, dets, rels)


def _record(n_rels=3, preds=(0, 1, 2)):
    boxes = tuple(BoundingBox(10 * i, 0, 10 * i + 8, 8) for i in range(4))
    rels = tuple(RelationTriplet(i, preds[i % len(preds)], i + 1) for i in range(n_rels))
    return ImageRecord("r", 50, 10, boxes, (0, 1, 0, 1), rels)


def test_iou_examples():
    b = BoundingBox(0, 0, 10, 10)
    assert iou(b, b) == 1.0
    assert iou(b, BoundingBox(20, 20, 30, 30)) == 0.0
    assert iou(b, BoundingBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert oracle.pixel_iou(b, BoundingBox(5, 0, 15, 10)) == 50 / 150


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=8, max_size=8))
def test_iou_matches_pixel_count_on_integer_boxes(v):
    a = BoundingBox(v[0], v[1], v[0] + 1 + v[2], v[1] + 1 + v[3])
    b = BoundingBox(v[4], v[5], v[4] + 1 + v[6], v[5] + 1 + v[7])
    assert iou(a, b) == pytest.approx(oracle.pixel_iou(a, b), abs=1e-12)
    assert iou(a, b) == pytest.approx(oracle.analytic_iou(a, b), abs=1e-15)


def test_iou_matrix_matches_scalar(rng):
    a = [random_box(rng) for _ in range(6)]
    b = [random_box(rng) for _ in range(4)]
    m = iou_matrix([x.as_tuple() for x in a], [x.as_tuple() for x in b])
    expected = [[iou(x, y) for y in b] for x in a]
    np.testing.assert_allclose(m, expected, atol=1e-12)


def test_perfect_predictions_match_everything():
    rec = _record()
    g = _perfect_graph(rec)
    assert match_triplets(g.relations, rec, k=len(rec.gt_relations)) == {0, 1, 2}
    assert recall_at_k([(g, rec)], 20) == 1.0
    assert mean_recall_at_k([(g, rec)], 20) == 1.0


def test_wrong_predicate_matches_nothing():
    rec = _record()
    g = _perfect_graph(rec, preds=lambda t: (t.pred_id + 1) % 5)
    assert match_triplets(g.relations, rec, k=100) == set()


def test_empty_predictions_zero_recall():
    rec = _record()
    g = SceneGraph.build("r", [], [])
    assert recall_at_k([(g, rec)], 50) == 0.0


def test_images_without_gt_are_skipped_and_all_empty_raises():
    rec = _record()
    empty = ImageRecord("e", 50, 10, rec.gt_boxes, rec.gt_classes, ())
    results = [(_perfect_graph(rec), rec), (SceneGraph.build("e", [], []), empty)]
    assert recall_at_k(results, 20) == 1.0
    with pytest.raises(EmptyEvaluationError):
        recall_at_k([(SceneGraph.build("e", [], []), empty)], 20)
    with pytest.raises(EmptyEvaluationError):
        mean_recall_at_k([(SceneGraph.build("e", [], []), empty)], 20)


def test_mean_recall_single_class_predicted():
    # balanced two-class GT, only class 0 predicted correctly; R is class-frequency driven
    rec = _record(n_rels=2, preds=(0, 1))
    dets = [Detection(b, c, 1.0) for b, c in zip(rec.gt_boxes, rec.gt_classes)]
    t = rec.gt_relations[0]
    g = SceneGraph.build("r", dets, [ScoredRelation.build(t.subj_idx, t.obj_idx, dets[0], dets[1], 0, 1.0)])
    assert mean_recall_at_k([(g, rec)], 20) == pytest.approx(0.5)
    assert per_predicate_recall([(g, rec)], 20) == {0: 1.0, 1: 0.0}


def test_partial_overlap_matcher_against_oracle():
    # 6 predictions, 4 GT, several candidates per GT
    boxes = (BoundingBox(0, 0, 10, 10), BoundingBox(20, 0, 30, 10), BoundingBox(0, 20, 10, 30), BoundingBox(1, 1, 11, 11))
    gt = (RelationTriplet(0, 0, 1), RelationTriplet(3, 0, 1), RelationTriplet(2, 1, 0), RelationTriplet(1, 2, 2))
    rec = ImageRecord("m", 40, 40, boxes, (0, 1, 2, 0), gt)
    dets = [Detection(b, c, s) for b, c, s in zip(boxes, (0, 1, 2, 0), (0.9, 0.8, 0.7, 0.6))]
    dets.append(Detection(BoundingBox(2, 2, 12, 12), 0, 0.95))
    pairs = [(4, 1, 0), (0, 1, 0), (3, 1, 0), (2, 0, 1), (1, 2, 1), (1, 2, 2)]
    rels = [ScoredRelation.build(s, o, dets[s], dets[o], p, 0.5) for s, o, p in pairs]
    g = SceneGraph.build("m", dets, rels)
    for k in range(1, 8):
        ours = match_triplets(g.relations, rec, k)
        ref = {i for i, ok in enumerate(oracle.brute_matches(g, rec, k)) if ok}
        assert ours == ref


def test_recall_agrees_with_oracle_on_random_fixtures():
    rng = np.random.default_rng(7)
    results = [random_fixture(rng, f"i{i}") for i in range(25)]
    for k in (1, 5, 20):
        assert recall_at_k(results, k) == pytest.approx(oracle.brute_recall(results, k), abs=1e-12)
        assert mean_recall_at_k(results, k) == pytest.approx(oracle.brute_mean_recall(results, k), abs=1e-12)


def test_recall_monotone_in_k():
    rng = np.random.default_rng(8)
    results = [random_fixture(rng, f"i{i}") for i in range(20)]
    r = [recall_at_k(results, k) for k in (20, 50, 100)]
    mr = [mean_recall_at_k(results, k) for k in (20, 50, 100)]
    assert r == sorted(r) and mr == sorted(mr)


def test_f1_values():
    assert f1_at_k(0.4, 0.4) == pytest.approx(0.4)
    assert f1_at_k(0.2, 0.0) == 0.0
    assert f1_at_k(0.0, 0.0) == 0.0
    # PAPER: REACT row, R 30.9 mR 18.0 F1 22.8
    assert f1_at_k(0.309, 0.180) == pytest.approx(0.2275, abs=5e-4)


@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_bounded_by_inputs(r, mr):
    f = f1_at_k(r, mr)
    assert min(r, mr) - 1e-12 <= f <= max(r, mr) + 1e-12


def test_map_examples():
    rec = _record()
    exact = [[Detection(b, c, 1.0) for b, c in zip(rec.gt_boxes, rec.gt_classes)]]
    assert map50(exact, [rec]) == 1.0
    assert map50([[]], [rec]) == 0.0


def _det_fixture(rng, n_images=5, n_classes=2):
    dets, recs = [], []
    for i in range(n_images):
        n = int(rng.integers(1, 6))
        boxes = tuple(random_box(rng) for _ in range(n))
        classes = tuple(int(c) for c in rng.integers(n_classes, size=n))
        recs.append(ImageRecord(f"d{i}", 100, 100, boxes, classes))
        d = []
        for b, c in zip(boxes, classes):
            if rng.random() < 0.8:
                x = np.array(b.as_tuple()) + rng.normal(0, 3, 4)
                d.append(Detection(BoundingBox(x[0], x[1], max(x[2], x[0] + 1), max(x[3], x[1] + 1)), c, float(rng.random())))
        for _ in range(int(rng.integers(0, 3))):
            d.append(Detection(random_box(rng), int(rng.integers(n_classes)), float(rng.random())))
        dets.append(d)
    return dets, recs


def test_map_against_reference_ap():
    rng = np.random.default_rng(11)
    for _ in range(20):
        dets, recs = _det_fixture(rng)
        assert map50(dets, recs) == pytest.approx(oracle.reference_map50(dets, recs), abs=1e-12)
        for c, ap in average_precision_per_class(dets, recs).items():
            assert ap == pytest.approx(oracle.reference_ap(dets, recs, c), abs=1e-12)


def test_map_invariant_under_monotone_score_transform():
    rng = np.random.default_rng(12)
    dets, recs = _det_fixture(rng, n_images=8)
    warped = [[Detection(d.box, d.class_id, d.score ** 3 * 0.5) for d in ds] for ds in dets]
    assert map50(warped, recs) == map50(dets, recs)


def test_report_consistency_and_json(tmp_path):
    rng = np.random.default_rng(13)
    results = [random_fixture(rng, f"i{i}") for i in range(10)]
    rep = report_from_results(results, [g.detections for g, _ in results], (20, 50, 100))
    for k in (20, 50, 100):
        assert rep.f1[k] == pytest.approx(f1_at_k(rep.recall[k], rep.mean_recall[k]))
        lo, hi = sorted((rep.recall[k], rep.mean_recall[k]))
        assert lo - 1e-12 <= rep.f1[k] <= hi + 1e-12
    d = json.loads(rep.dumps())
    assert d["format"] == "sgg-lab/1"
    back = MetricReport.from_json(d)
    assert back.recall == rep.recall and back.map50 == rep.map50
    assert "mR@20" in rep.table() and "mAP" in rep.table()
