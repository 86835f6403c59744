"""Slow, independent reference implementations used by the test-suite.

Nothing here imports the production metric, selection or model modules;
agreement between the two paths is what the tests check.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .core import BoundingBox, Detection, ImageRecord, SceneGraph


def _overlap_1d(a0, a1, b0, b1):
    lo = a0 if a0 > b0 else b0
    hi = a1 if a1 < b1 else b1
    return hi - lo if hi > lo else 0.0


def analytic_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _overlap_1d(a.x1, a.x2, b.x1, b.x2) * _overlap_1d(a.y1, a.y2, b.y1, b.y2)
    if inter == 0:
        return 0.0
    area_a = (a.x2 - a.x1) * (a.y2 - a.y1)
    area_b = (b.x2 - b.x1) * (b.y2 - b.y1)
    return inter / (area_a + area_b - inter)


def pixel_iou(a: BoundingBox, b: BoundingBox, resolution: int = 1) -> float:
    """IoU by counting grid cells (side ``1/resolution``) whose centres fall in each box."""
    x0 = math.floor(min(a.x1, b.x1))
    y0 = math.floor(min(a.y1, b.y1))
    x1 = math.ceil(max(a.x2, b.x2))
    y1 = math.ceil(max(a.y2, b.y2))
    xs = x0 + (np.arange((x1 - x0) * resolution) + 0.5) / resolution
    ys = y0 + (np.arange((y1 - y0) * resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx > a.x1) & (gx < a.x2) & (gy > a.y1) & (gy < a.y2)
    in_b = (gx > b.x1) & (gx < b.x2) & (gy > b.y1) & (gy < b.y2)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def brute_pairs(n: int) -> list[tuple[int, int]]:
    out = []
    for i in range(n):
        for j in range(n):
            if i != j:
                out.append((i, j))
    return out


def _compat(graph: SceneGraph, rec: ImageRecord, iou_thresh: float) -> np.ndarray:
    """Full prediction x GT compatibility matrix (no early exit)."""
    preds = graph.relations
    gts = rec.gt_relations
    m = np.zeros((len(preds), len(gts)), dtype=bool)
    for p, r in enumerate(preds):
        for g, t in enumerate(gts):
            m[p, g] = (
                r.pred_id == t.pred_id
                and r.subj.class_id == rec.gt_classes[t.subj_idx]
                and r.obj.class_id == rec.gt_classes[t.obj_idx]
                and analytic_iou(r.subj.box, rec.gt_boxes[t.subj_idx]) >= iou_thresh
                and analytic_iou(r.obj.box, rec.gt_boxes[t.obj_idx]) >= iou_thresh
            )
    return m


def brute_matches(graph: SceneGraph, rec: ImageRecord, k: int, iou_thresh: float = 0.5) -> list[bool]:
    m = _compat(graph, rec, iou_thresh)
    taken = [False] * len(rec.gt_relations)
    for p in range(min(k, m.shape[0])):
        for g in range(m.shape[1]):
            if m[p, g] and not taken[g]:
                taken[g] = True
                break
    return taken


def brute_recall(results: Sequence[tuple[SceneGraph, ImageRecord]], k: int, iou_thresh: float = 0.5) -> float:
    total = 0.0
    count = 0
    for graph, rec in results:
        if len(rec.gt_relations) == 0:
            continue
        taken = brute_matches(graph, rec, k, iou_thresh)
        total += sum(taken) / len(taken)
        count += 1
    return total / count


def brute_mean_recall(
    results: Sequence[tuple[SceneGraph, ImageRecord]], k: int, iou_thresh: float = 0.5
) -> float:
    hit: dict[int, int] = {}
    tot: dict[int, int] = {}
    for graph, rec in results:
        taken = brute_matches(graph, rec, k, iou_thresh)
        for t, ok in zip(rec.gt_relations, taken):
            tot[t.pred_id] = tot.get(t.pred_id, 0) + 1
            hit[t.pred_id] = hit.get(t.pred_id, 0) + int(ok)
    rates = [hit[p] / tot[p] for p in tot]
    return sum(rates) / len(rates)


def reference_ap(
    detections: Sequence[Sequence[Detection]], records: Sequence[ImageRecord], cls: int, iou_thresh: float = 0.5
) -> float:
    n_gt = sum(1 for rec in records for c in rec.gt_classes if c == cls)
    cand = []
    for i, dets in enumerate(detections):
        for j, d in enumerate(dets):
            if d.class_id == cls:
                cand.append((d.score, i, j))
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    used = {i: [False] * len(rec.gt_boxes) for i, rec in enumerate(records)}
    flags = []
    for _, i, j in cand:
        box = detections[i][j].box
        best, best_g = -1.0, None
        for g, (gb, gc) in enumerate(zip(records[i].gt_boxes, records[i].gt_classes)):
            if gc != cls or used[i][g]:
                continue
            v = analytic_iou(box, gb)
            if v > best:
                best, best_g = v, g
        if best_g is not None and best >= iou_thresh:
            used[i][best_g] = True
            flags.append(1)
        else:
            flags.append(0)
    precisions, recalls = [], []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += 1 - f
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    total = 0.0
    for step in range(101):
        r = step / 100
        best = 0.0
        for p, rc in zip(precisions, recalls):
            if rc >= r and p > best:
                best = p
        total += best
    return total / 101


def reference_map50(detections: Sequence[Sequence[Detection]], records: Sequence[ImageRecord]) -> float:
    classes = sorted({c for rec in records for c in rec.gt_classes})
    return sum(reference_ap(detections, records, c) for c in classes) / len(classes)


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def fd_scan_optimum(ks: Sequence[int], values: Sequence[float], epsilon: float, theta: int) -> int:
    """First grid point whose finite-difference slope magnitude is below epsilon."""
    n = len(ks)
    for i in range(n):
        if i == 0:
            slope = (values[1] - values[0]) / (ks[1] - ks[0])
        elif i == n - 1:
            slope = (values[i] - values[i - 1]) / (ks[i] - ks[i - 1])
        else:
            slope = (values[i + 1] - values[i - 1]) / (ks[i + 1] - ks[i - 1])
        if abs(slope) < epsilon:
            return ks[i]
    return theta


def brute_nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Class-aware NMS by repeated argmax and removal of everything it overlaps."""
    remaining = list(range(len(detections)))
    kept = []
    while remaining:
        best = remaining[0]
        for i in remaining:
            if detections[i].score > detections[best].score:
                best = i
        kept.append(detections[best])
        survivors = []
        for i in remaining:
            if i == best:
                continue
            d = detections[i]
            if d.class_id == detections[best].class_id and analytic_iou(d.box, detections[best].box) > iou_threshold:
                continue
            survivors.append(i)
        remaining = survivors
    return kept


def bilinear_sample(fmap: np.ndarray, y: float, x: float) -> np.ndarray:
    """Value of a (C, H, W) map at fractional (y, x), coordinates clamped to the map."""
    _, H, W = fmap.shape
    y = min(max(y, 0.0), H - 1.0)
    x = min(max(x, 0.0), W - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    wy, wx = y - y0, x - x0
    return (
        fmap[:, y0, x0] * (1 - wy) * (1 - wx)
        + fmap[:, y0, x1] * (1 - wy) * wx
        + fmap[:, y1, x0] * wy * (1 - wx)
        + fmap[:, y1, x1] * wy * wx
    )
