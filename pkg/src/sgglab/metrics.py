"""Scene-graph evaluation: triplet matching, R@K, mR@K, F1@K and mAP@50."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import FORMAT, BoundingBox, Detection, ImageRecord, SceneGraph, ScoredRelation

DEFAULT_KS = (20, 50, 100)


class EmptyEvaluationError(ValueError):
    """No ground truth to evaluate against."""


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


# ---------------------------------------------------------------------------
# relation recall


def match_ranks(
    relations: Sequence[ScoredRelation], record: ImageRecord, iou_thresh: float = 0.5, k: int | None = None
) -> list[int | None]:
    """For each GT triplet, the rank of the prediction that claimed it (or None).

    Predictions are walked in rank order; each claims the lowest-index
    unmatched GT triplet with equal predicate, equal subject/object classes
    and IoU >= ``iou_thresh`` on both boxes. Matching at a smaller K is the
    prefix of this walk, so ``rank < K`` gives the matches at K.
    """
    gt = record.gt_relations
    ranks: list[int | None] = [None] * len(gt)
    if not gt or not relations:
        return ranks
    preds = relations if k is None else relations[:k]
    gt_subj = [record.gt_boxes[t.subj_idx] for t in gt]
    gt_obj = [record.gt_boxes[t.obj_idx] for t in gt]
    open_ = set(range(len(gt)))
    for rank, p in enumerate(preds):
        for g in sorted(open_):
            t = gt[g]
            if (
                p.pred_id == t.pred_id
                and p.subj.class_id == record.gt_classes[t.subj_idx]
                and p.obj.class_id == record.gt_classes[t.obj_idx]
                and iou(p.subj.box, gt_subj[g]) >= iou_thresh
                and iou(p.obj.box, gt_obj[g]) >= iou_thresh
            ):
                ranks[g] = rank
                open_.discard(g)
                break
        if not open_:
            break
    return ranks


def match_triplets(
    relations: Sequence[ScoredRelation], record: ImageRecord, k: int, iou_thresh: float = 0.5
) -> set[int]:
    """Indices of GT triplets matched by the top-``k`` predictions."""
    return {g for g, r in enumerate(match_ranks(relations, record, iou_thresh, k)) if r is not None}


Results = Sequence[tuple[SceneGraph, ImageRecord]]


def _all_ranks(results: Results, iou_thresh: float) -> list[list[int | None]]:
    return [match_ranks(g.relations, rec, iou_thresh) for g, rec in results]


def _recall_from_ranks(results: Results, ranks: list[list[int | None]], k: int) -> float:
    per_image = []
    for (_, rec), rk in zip(results, ranks):
        if not rec.gt_relations:
            continue
        per_image.append(sum(1 for r in rk if r is not None and r < k) / len(rec.gt_relations))
    if not per_image:
        raise EmptyEvaluationError("every image has zero GT relations")
    return float(np.mean(per_image))


def _per_predicate_from_ranks(
    results: Results, ranks: list[list[int | None]], k: int
) -> dict[int, float]:
    hits: dict[int, int] = defaultdict(int)
    total: dict[int, int] = defaultdict(int)
    for (_, rec), rk in zip(results, ranks):
        for t, r in zip(rec.gt_relations, rk):
            total[t.pred_id] += 1
            if r is not None and r < k:
                hits[t.pred_id] += 1
    if not total:
        raise EmptyEvaluationError("no GT relations in the dataset")
    return {p: hits[p] / total[p] for p in sorted(total)}


def recall_at_k(results: Results, k: int, iou_thresh: float = 0.5) -> float:
    """Mean per-image recall of GT triplets in the top-``k`` predictions.

    Images without GT relations are skipped.
    """
    return _recall_from_ranks(results, _all_ranks(results, iou_thresh), k)


def per_predicate_recall(results: Results, k: int, iou_thresh: float = 0.5) -> dict[int, float]:
    return _per_predicate_from_ranks(results, _all_ranks(results, iou_thresh), k)


def mean_recall_at_k(results: Results, k: int, iou_thresh: float = 0.5) -> float:
    """Dataset-level recall per predicate class, averaged over classes present in GT."""
    table = per_predicate_recall(results, k, iou_thresh)
    return float(np.mean(list(table.values())))


def f1_at_k(recall: float, mean_recall: float) -> float:
    if recall + mean_recall == 0:
        return 0.0
    return 2.0 * recall * mean_recall / (recall + mean_recall)


# ---------------------------------------------------------------------------
# detection mAP


def _ap101(tp: np.ndarray, n_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # i/100 rather than linspace: linspace(0, 1, 101)[30] is 0.30000000000000004,
    # which would reject a recall of exactly 3/10
    thresholds = np.arange(101) / 100.0
    idx = np.searchsorted(recall, thresholds, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


def average_precision_per_class(
    detections: Sequence[Sequence[Detection]],
    records: Sequence[ImageRecord],
    iou_thresh: float = 0.5,
) -> dict[int, float]:
    """Per-class AP with dataset-wide score ranking and 101-point interpolation.

    Detections of a class are visited by descending score (ties: image
    order, then detection order); each claims the unmatched same-class GT
    box of highest IoU if that IoU is >= ``iou_thresh``.
    """
    gt_count: dict[int, int] = defaultdict(int)
    for rec in records:
        for c in rec.gt_classes:
            gt_count[c] += 1
    if not gt_count:
        raise EmptyEvaluationError("no GT boxes in the dataset")

    by_class: dict[int, list[tuple[float, int, int]]] = defaultdict(list)
    for i, dets in enumerate(detections):
        for j, d in enumerate(dets):
            by_class[d.class_id].append((d.score, i, j))

    ious: dict[tuple[int, int], np.ndarray] = {}
    aps = {}
    for c in sorted(gt_count):
        cand = sorted(by_class.get(c, []), key=lambda t: (-t[0], t[1], t[2]))
        matched: dict[int, np.ndarray] = {}
        tp = np.zeros(len(cand))
        for n, (_, i, j) in enumerate(cand):
            rec = records[i]
            gt_idx = [g for g, gc in enumerate(rec.gt_classes) if gc == c]
            if not gt_idx:
                continue
            key = (i, c)
            if key not in ious:
                gt_boxes = np.array([rec.gt_boxes[g].as_tuple() for g in gt_idx])
                det_boxes = np.array([d.box.as_tuple() for d in detections[i]])
                ious[key] = iou_matrix(det_boxes, gt_boxes)
                matched[i] = np.zeros(len(gt_idx), dtype=bool)
            used = matched.setdefault(i, np.zeros(len(gt_idx), dtype=bool))
            row = np.where(used, -1.0, ious[key][j])
            best = int(np.argmax(row))
            if row[best] >= iou_thresh:
                used[best] = True
                tp[n] = 1.0
        aps[c] = _ap101(tp, gt_count[c])
        ious = {k: v for k, v in ious.items() if k[1] != c}
    return aps


def map50(
    detections: Sequence[Sequence[Detection]], records: Sequence[ImageRecord], iou_thresh: float = 0.5
) -> float:
    aps = average_precision_per_class(detections, records, iou_thresh)
    return float(np.mean(list(aps.values())))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    recall: dict[int, float]
    mean_recall: dict[int, float]
    f1: dict[int, float]
    f1_avg: float
    map50: float
    per_predicate_recall: dict[int, dict[int, float]]
    num_images: int
    num_gt_triplets: int
    graph_constraint: bool = True
    k_budget: int | None = None
    map50_detector: float | None = None
    freeze_check: bool | None = None
    latency: dict | None = None
    params: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["format"] = FORMAT
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, d: Mapping) -> "MetricReport":
        d = dict(d)
        d.pop("format", None)
        d.pop("config_hash", None)
        intkeys = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        for key in ("recall", "mean_recall", "f1"):
            d[key] = intkeys(d[key])
        d["per_predicate_recall"] = {int(k): intkeys(v) for k, v in d["per_predicate_recall"].items()}
        return cls(**d)

    def table(self, predicate_names: Sequence[str] | None = None) -> str:
        """Render R/mR/F1/mAP (x100) as a Markdown table."""
        ks = sorted(self.recall)
        mr = " / ".join(f"{100 * self.mean_recall[k]:.1f}" for k in ks)
        r = " / ".join(f"{100 * self.recall[k]:.1f}" for k in ks)
        head = "/".join(str(k) for k in ks)
        lines = [
            f"| mR@{head} | R@{head} | F1@K | mAP50 |",
            "|---|---|---|---|",
            f"| {mr} | {r} | {100 * self.f1_avg:.1f} | {100 * self.map50:.1f} |",
        ]
        return "\n".join(lines)


def report_from_results(
    results: Results,
    detections: Sequence[Sequence[Detection]],
    ks: Iterable[int] = DEFAULT_KS,
    iou_thresh: float = 0.5,
    graph_constraint: bool = True,
) -> MetricReport:
    ks = sorted(ks)
    ranks = _all_ranks(results, iou_thresh)
    records = [rec for _, rec in results]
    recall, mean_recall, f1, per_pred = {}, {}, {}, {}
    for k in ks:
        recall[k] = _recall_from_ranks(results, ranks, k)
        per_pred[k] = _per_predicate_from_ranks(results, ranks, k)
        mean_recall[k] = float(np.mean(list(per_pred[k].values())))
        f1[k] = f1_at_k(recall[k], mean_recall[k])
    return MetricReport(
        recall=recall,
        mean_recall=mean_recall,
        f1=f1,
        f1_avg=float(np.mean([f1[k] for k in ks])),
        map50=map50(detections, records),
        per_predicate_recall=per_pred,
        num_images=len(records),
        num_gt_triplets=sum(len(r.gt_relations) for r in records),
        graph_constraint=graph_constraint,
    )


def evaluate_dataset(
    pipeline, dataset: Sequence[ImageRecord], ks: Iterable[int] = DEFAULT_KS, k_budget: int = 100
) -> MetricReport:
    """Run ``pipeline.forward`` per image and aggregate every metric.

    Also recomputes mAP@50 from detector-only output and records whether it
    equals the pipeline's (the freeze cross-check).
    """
    ks = tuple(ks)
    # only the top max(K) relations are ever scored
    graphs = [pipeline.forward(rec, k_budget, keep_top=max(ks)) for rec in dataset]
    results = list(zip(graphs, dataset))
    report = report_from_results(
        results, [g.detections for g in graphs], ks, graph_constraint=pipeline.graph_constraint
    )
    det_only = [pipeline.detect(rec).detections for rec in dataset]
    report.map50_detector = map50(det_only, list(dataset))
    report.freeze_check = report.map50_detector == report.map50 and all(
        tuple(a) == tuple(g.detections) for a, g in zip(det_only, graphs)
    )
    report.k_budget = k_budget
    return report
