"""The geometric-relations world: coloured shapes whose predicates follow from geometry."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import BoundingBox, ImageRecord, RelationTriplet, save_annotations
from .metrics import iou

PREDICATES = ("above", "below", "left_of", "right_of", "inside", "overlapping")
ABOVE, BELOW, LEFT_OF, RIGHT_OF, INSIDE, OVERLAPPING = range(6)

SHAPES = ("box", "ellipse", "diamond")
COLORS = {
    "red": (230, 25, 75),
    "green": (60, 180, 75),
    "blue": (0, 130, 200),
    "yellow": (255, 225, 25),
}
CATEGORIES = tuple(f"{c}_{s}" for s in SHAPES for c in COLORS)
OVERLAP_IOU = 0.05


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 100
    num_classes: int = 12
    min_objects: int = 2
    max_objects: int = 12
    width: int = 128
    height: int = 128
    seed: int = 0
    # pairs closer than this (centre distance / image side) are annotated
    near_distance: float = 0.25
    max_relations: int = 16
    p_container: float = 0.2
    p_inside: float = 0.5
    # placements within this many pixels of a predicate boundary are redrawn
    margin: float = 3.0
    id_prefix: str = "synth"

    def __post_init__(self):
        if self.min_objects < 2:
            raise ValueError("min_objects must be >= 2")
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects < min_objects")
        if not 1 <= self.num_classes <= len(CATEGORIES):
            raise ValueError(f"num_classes must be in [1, {len(CATEGORIES)}]")
        if self.width < 32 or self.height < 32:
            raise ValueError("images must be at least 32x32")


def class_color(class_id: int) -> tuple[int, int, int]:
    return COLORS[CATEGORIES[class_id].split("_")[0]]


def class_shape(class_id: int) -> str:
    return CATEGORIES[class_id].split("_", 1)[1]


def contains(outer: BoundingBox, inner: BoundingBox) -> bool:
    return outer.x1 <= inner.x1 and outer.y1 <= inner.y1 and inner.x2 <= outer.x2 and inner.y2 <= outer.y2


def predicate_rule(subj: BoundingBox, obj: BoundingBox) -> set[int]:
    """The single predicate geometry assigns to an ordered pair.

    ``inside`` if the subject lies within the object (boundary included);
    else ``overlapping`` when IoU > 0.05; else the direction of the
    dominant axis of the centre offset, with ties going horizontal.
    """
    if contains(obj, subj):
        return {INSIDE}
    if iou(subj, obj) > OVERLAP_IOU:
        return {OVERLAPPING}
    (sx, sy), (ox, oy) = subj.center, obj.center
    dx, dy = ox - sx, oy - sy
    if abs(dx) >= abs(dy):
        return {LEFT_OF} if sx < ox else {RIGHT_OF}
    return {ABOVE} if sy < oy else {BELOW}


def is_salient(subj: BoundingBox, obj: BoundingBox, width: int, height: int, near: float) -> bool:
    """Whether an ordered pair carries a ground-truth annotation."""
    if contains(obj, subj) or contains(subj, obj) or iou(subj, obj) > OVERLAP_IOU:
        return True
    (sx, sy), (ox, oy) = subj.center, obj.center
    return float(np.hypot((ox - sx) / width, (oy - sy) / height)) <= near


def annotate(boxes, width: int, height: int, near: float) -> list[RelationTriplet]:
    rels = []
    for i, s in enumerate(boxes):
        for j, o in enumerate(boxes):
            if i != j and is_salient(s, o, width, height, near):
                (p,) = predicate_rule(s, o)
                rels.append(RelationTriplet(i, p, j))
    return rels


def shape_mask(box: BoundingBox, shape: str, width: int, height: int) -> tuple[slice, slice, np.ndarray]:
    """Pixel mask of a shape inscribed in an integer-aligned box."""
    x1, y1, x2, y2 = (int(v) for v in box.as_tuple())
    ys, xs = np.mgrid[y1:y2, x1:x2]
    u = (xs + 0.5 - 0.5 * (x1 + x2)) / (0.5 * (x2 - x1))
    v = (ys + 0.5 - 0.5 * (y1 + y2)) / (0.5 * (y2 - y1))
    if shape == "box":
        mask = np.ones_like(u, dtype=bool)
    elif shape == "ellipse":
        mask = u * u + v * v <= 1.0
    else:
        mask = np.abs(u) + np.abs(v) <= 1.0
    return slice(y1, y2), slice(x1, x2), mask


def render(width: int, height: int, boxes, classes) -> np.ndarray:
    """Paint objects in list order onto a black canvas; later objects overpaint."""
    img = np.zeros((height, width, 3), dtype=np.uint8)
    for box, c in zip(boxes, classes):
        ys, xs, mask = shape_mask(box, class_shape(c), width, height)
        img[ys, xs][mask] = class_color(c)
    return img


def ambiguous(a: BoundingBox, b: BoundingBox, width: int, height: int, near: float, margin: float) -> bool:
    """True when the pair sits within ``margin`` of a predicate decision boundary."""
    if margin <= 0:
        return False
    for s, o in ((a, b), (b, a)):
        if contains(o, s):
            continue
        v = iou(s, o)
        if v > 0:
            # nearly contained: sticks out of o by less than the margin
            out = max(o.x1 - s.x1, s.x2 - o.x2, o.y1 - s.y1, s.y2 - o.y2)
            if out < margin:
                return True
        if abs(v - OVERLAP_IOU) < 0.02:
            return True
    if iou(a, b) <= OVERLAP_IOU and not (contains(a, b) or contains(b, a)):
        (ax, ay), (bx, by) = a.center, b.center
        dist = np.hypot((bx - ax) / width, (by - ay) / height)
        if dist <= near + 0.02 and abs(abs(bx - ax) - abs(by - ay)) < margin:
            return True
        if abs(dist - near) < 0.01:
            return True
    return False


def _random_box(rng: np.random.Generator, lo: int, hi: int, width: int, height: int) -> BoundingBox:
    w = int(rng.integers(lo, min(hi, width) + 1))
    h = int(rng.integers(lo, min(hi, height) + 1))
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return BoundingBox(float(x), float(y), float(x + w), float(y + h))


def _layout(rng: np.random.Generator, cfg: SynthConfig) -> list[BoundingBox]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    W, H = cfg.width, cfg.height
    big_lo, big_hi = 56, min(W, H) - 8
    containers: list[BoundingBox] = []
    smalls: list[BoundingBox] = []
    def clear(box, others):
        return not any(ambiguous(box, o, W, H, cfg.near_distance, cfg.margin) for o in others)

    for _ in range(n):
        if rng.random() < cfg.p_container and len(containers) < 2:
            box = _random_box(rng, big_lo, big_hi, W, H)
            if clear(box, containers + smalls):
                containers.append(box)
            continue
        for _attempt in range(30):
            if containers and rng.random() < cfg.p_inside:
                host = containers[int(rng.integers(len(containers)))]
                hw, hh = int(host.width), int(host.height)
                w = int(rng.integers(8, max(9, min(36, hw - 4) + 1)))
                h = int(rng.integers(8, max(9, min(36, hh - 4) + 1)))
                x = int(host.x1) + int(rng.integers(0, hw - w + 1))
                y = int(host.y1) + int(rng.integers(0, hh - h + 1))
                box = BoundingBox(float(x), float(y), float(x + w), float(y + h))
            else:
                box = _random_box(rng, 8, 36, W, H)
            # keep small objects mostly visible
            if all(iou(box, other) <= 0.3 for other in smalls) and clear(box, containers + smalls):
                smalls.append(box)
                break
    # containers first so nested objects stay visible
    boxes = containers + smalls
    return boxes


def generate_record(rng: np.random.Generator, cfg: SynthConfig, image_id: str) -> ImageRecord:
    while True:
        boxes = _layout(rng, cfg)
        if len(boxes) < cfg.min_objects:
            continue
        rels = annotate(boxes, cfg.width, cfg.height, cfg.near_distance)
        if 1 <= len(rels) <= cfg.max_relations:
            break
    classes = [int(rng.integers(cfg.num_classes)) for _ in boxes]
    image = render(cfg.width, cfg.height, boxes, classes)
    return ImageRecord(image_id, cfg.width, cfg.height, tuple(boxes), tuple(classes), tuple(rels), image)


def generate_dataset(cfg: SynthConfig) -> list[ImageRecord]:
    """Deterministic for a given config (seed included)."""
    rng = np.random.default_rng(cfg.seed)
    width = max(5, len(str(cfg.num_images)))
    return [generate_record(rng, cfg, f"{cfg.id_prefix}_{i:0{width}d}") for i in range(cfg.num_images)]


def dense_record(n: int, width: int = 128, height: int = 128, seed: int = 0, num_classes: int = 12) -> ImageRecord:
    """An image with ``n`` random boxes and no relations, for latency sweeps."""
    rng = np.random.default_rng(seed)
    boxes = [_random_box(rng, 6, 40, width, height) for _ in range(n)]
    classes = [int(rng.integers(num_classes)) for _ in boxes]
    image = render(width, height, boxes, classes)
    return ImageRecord(f"dense_{n}", width, height, tuple(boxes), tuple(classes), (), image)


def write_dataset(cfg: SynthConfig, path: str | Path, records: list[ImageRecord] | None = None) -> list[ImageRecord]:
    """Write annotation JSON, PPM images and a ``<name>.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = generate_dataset(cfg)
    save_annotations(path, records, CATEGORIES[: cfg.num_classes], PREDICATES, image_dir=f"{path.stem}_images")
    manifest = {"format": "sgg-lab/1", "generator": "synth", "config": asdict(cfg)}
    path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return records


def split(records: list[ImageRecord], n_train: int) -> tuple[list[ImageRecord], list[ImageRecord]]:
    return records[:n_train], records[n_train:]
