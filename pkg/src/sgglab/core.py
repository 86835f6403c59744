"""Domain types, annotation loading/validation and prediction serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT = "sgg-lab/1"


class AnnotationError(ValueError):
    """Raised when an annotation file violates the schema or type invariants."""


class PredictionFormatError(ValueError):
    """Raised when a prediction file cannot be parsed."""


@dataclass(frozen=True)
class BoundingBox:
    """Corner-format box in pixel coordinates, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float


@dataclass(frozen=True)
class RelationTriplet:
    subj_idx: int
    pred_id: int
    obj_idx: int


@dataclass(frozen=True)
class ImageRecord:
    """One annotated image.

    ``image`` is an ``H x W x C`` uint8 grid, or ``None`` when only the
    annotation was loaded. It does not take part in equality.
    """

    image_id: str
    width: int
    height: int
    gt_boxes: tuple[BoundingBox, ...]
    gt_classes: tuple[int, ...]
    gt_relations: tuple[RelationTriplet, ...] = ()
    image: np.ndarray | None = field(default=None, compare=False, repr=False)


def relation_score(subj_score: float, theta_pred: float, obj_score: float) -> float:
    """theta_rel = theta_obj * theta_pred * theta_subj, evaluated left to right."""
    return float(obj_score) * float(theta_pred) * float(subj_score)


@dataclass(frozen=True)
class ScoredRelation:
    subj_idx: int
    obj_idx: int
    subj: Detection
    obj: Detection
    pred_id: int
    theta_pred: float
    theta_rel: float

    @classmethod
    def build(
        cls, subj_idx: int, obj_idx: int, subj: Detection, obj: Detection, pred_id: int, theta_pred: float
    ) -> "ScoredRelation":
        theta_pred = float(theta_pred)
        return cls(
            subj_idx, obj_idx, subj, obj, int(pred_id), theta_pred,
            relation_score(subj.score, theta_pred, obj.score),
        )

    def sort_key(self) -> tuple[float, int, int, int]:
        return (-self.theta_rel, self.subj_idx, self.obj_idx, self.pred_id)


def rank_relations(relations: Iterable[ScoredRelation]) -> tuple[ScoredRelation, ...]:
    """Order by theta_rel descending, ties by (subj, obj, pred) ascending."""
    return tuple(sorted(relations, key=ScoredRelation.sort_key))


@dataclass(frozen=True)
class SceneGraph:
    image_id: str
    detections: tuple[Detection, ...]
    relations: tuple[ScoredRelation, ...]

    @classmethod
    def build(cls, image_id: str, detections: Sequence[Detection], relations: Iterable[ScoredRelation]):
        return cls(image_id, tuple(detections), rank_relations(relations))


# ---------------------------------------------------------------------------
# validation


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def validate_record(
    record: ImageRecord, num_classes: int | None = None, num_predicates: int | None = None
) -> list[str]:
    """Return every invariant violation of ``record``; an empty list means valid.

    Never raises: malformed field values are reported, not propagated.
    """
    problems: list[str] = []
    try:
        width, height = record.width, record.height
    except Exception as exc:  # noqa: BLE001
        return [f"record: unreadable ({exc!r})"]
    size_ok = _is_num(width) and _is_num(height) and width > 0 and height > 0
    if not size_ok:
        problems.append(f"size: invalid width/height {width!r}x{height!r}")

    boxes = record.gt_boxes
    classes = record.gt_classes
    try:
        boxes = list(boxes)
    except TypeError:
        problems.append(f"gt_boxes: not a sequence ({boxes!r})")
        boxes = []
    try:
        classes = list(classes)
    except TypeError:
        problems.append(f"gt_classes: not a sequence ({classes!r})")
        classes = []
    if len(boxes) != len(classes):
        problems.append(f"gt_classes: length {len(classes)} != gt_boxes length {len(boxes)}")

    for i, box in enumerate(boxes):
        coords = [getattr(box, a, None) for a in ("x1", "y1", "x2", "y2")]
        if not all(_is_num(c) and math.isfinite(c) for c in coords):
            problems.append(f"box {i}: non-numeric coordinates {coords!r}")
            continue
        x1, y1, x2, y2 = coords
        if not (x1 < x2 and y1 < y2):
            problems.append(f"box {i}: degenerate ({x1}, {y1}, {x2}, {y2})")
        elif size_ok and not (0 <= x1 and 0 <= y1 and x2 <= width and y2 <= height):
            problems.append(f"box {i}: outside image bounds ({x1}, {y1}, {x2}, {y2})")

    for i, c in enumerate(classes):
        if not _is_int(c) or c < 0 or (num_classes is not None and c >= num_classes):
            problems.append(f"class {i}: invalid class id {c!r}")

    try:
        rels = list(record.gt_relations)
    except TypeError:
        problems.append(f"gt_relations: not a sequence ({record.gt_relations!r})")
        rels = []
    n = len(boxes)
    for i, rel in enumerate(rels):
        s = getattr(rel, "subj_idx", None)
        p = getattr(rel, "pred_id", None)
        o = getattr(rel, "obj_idx", None)
        if not (_is_int(s) and 0 <= s < n) or not (_is_int(o) and 0 <= o < n):
            problems.append(f"relation {i}: dangling index ({s!r}, {o!r}) for {n} boxes")
        elif s == o:
            problems.append(f"relation {i}: self-relation on object {s}")
        if not _is_int(p) or p < 0 or (num_predicates is not None and p >= num_predicates):
            problems.append(f"relation {i}: invalid predicate id {p!r}")
    return problems


# ---------------------------------------------------------------------------
# annotation files


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary (P6, maxval 255) portable pixmap."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM images need 3 channels")
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def _field(entry: dict, key: str, image_id: str):
    if key not in entry:
        raise AnnotationError(f"image {image_id!r}: missing field {key!r}")
    return entry[key]


def _parse_image(entry: dict, base: Path, n_cls: int, n_pred: int) -> ImageRecord:
    if not isinstance(entry, dict):
        raise AnnotationError(f"image entry is not an object: {entry!r}")
    image_id = entry.get("image_id")
    if not isinstance(image_id, str):
        raise AnnotationError(f"image {image_id!r}: field 'image_id' must be a string")
    width = _field(entry, "width", image_id)
    height = _field(entry, "height", image_id)
    if not (_is_int(width) and _is_int(height)):
        raise AnnotationError(f"image {image_id!r}: fields 'width'/'height' must be integers")
    raw_boxes = _field(entry, "boxes", image_id)
    raw_classes = _field(entry, "classes", image_id)
    raw_rels = _field(entry, "relations", image_id)
    try:
        boxes = tuple(BoundingBox(*(float(v) for v in b)) for b in raw_boxes)
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"image {image_id!r}: field 'boxes' malformed ({exc})") from None
    if not all(_is_int(c) for c in raw_classes):
        raise AnnotationError(f"image {image_id!r}: field 'classes' must hold integers")
    try:
        rels = tuple(RelationTriplet(int(s), int(p), int(o)) for s, p, o in raw_rels)
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"image {image_id!r}: field 'relations' malformed ({exc})") from None

    image = None
    if "file" in entry:
        image = read_ppm(base / entry["file"])
        if image.shape[:2] != (height, width):
            raise AnnotationError(f"image {image_id!r}: field 'file' has shape {image.shape[:2]}")
    record = ImageRecord(image_id, width, height, boxes, tuple(int(c) for c in raw_classes), rels, image)
    problems = validate_record(record, n_cls, n_pred)
    if problems:
        raise AnnotationError(f"image {image_id!r}: " + "; ".join(problems))
    return record


@dataclass(frozen=True)
class Dataset:
    categories: tuple[str, ...]
    predicates: tuple[str, ...]
    records: tuple[ImageRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise AnnotationError(f"{path}: top level must be an object")
    if doc.get("format") != FORMAT:
        raise AnnotationError(f"{path}: field 'format' must be {FORMAT!r}, got {doc.get('format')!r}")
    for key in ("categories", "predicates", "images"):
        if not isinstance(doc.get(key), list):
            raise AnnotationError(f"{path}: field {key!r} must be a list")
    cats = tuple(str(c) for c in doc["categories"])
    preds = tuple(str(p) for p in doc["predicates"])
    records = [_parse_image(e, path.parent, len(cats), len(preds)) for e in doc["images"]]
    records.sort(key=lambda r: r.image_id)
    return Dataset(cats, preds, tuple(records))


def load_annotations(path: str | Path) -> list[ImageRecord]:
    return list(load_dataset(path).records)


def save_annotations(
    path: str | Path,
    records: Sequence[ImageRecord],
    categories: Sequence[str],
    predicates: Sequence[str],
    image_dir: str | None = None,
) -> None:
    """Write the annotation JSON; with ``image_dir`` also write each image as PPM."""
    path = Path(path)
    images = []
    for r in records:
        entry = {
            "image_id": r.image_id,
            "width": r.width,
            "height": r.height,
            "boxes": [list(b.as_tuple()) for b in r.gt_boxes],
            "classes": list(r.gt_classes),
            "relations": [[t.subj_idx, t.pred_id, t.obj_idx] for t in r.gt_relations],
        }
        if image_dir is not None and r.image is not None:
            rel = Path(image_dir) / f"{r.image_id}.ppm"
            (path.parent / rel).parent.mkdir(parents=True, exist_ok=True)
            write_ppm(path.parent / rel, r.image)
            entry["file"] = rel.as_posix()
        images.append(entry)
    doc = {"format": FORMAT, "categories": list(categories), "predicates": list(predicates), "images": images}
    path.write_text(json.dumps(doc))


# ---------------------------------------------------------------------------
# prediction files (JSON lines, one SceneGraph per line)


def _det_to_json(d: Detection) -> dict:
    return {"box": list(d.box.as_tuple()), "class_id": d.class_id, "score": d.score}


def _det_from_json(o: dict) -> Detection:
    return Detection(BoundingBox(*(float(v) for v in o["box"])), int(o["class_id"]), float(o["score"]))


def graph_to_json(g: SceneGraph) -> dict:
    return {
        "format": FORMAT,
        "image_id": g.image_id,
        "detections": [_det_to_json(d) for d in g.detections],
        "relations": [
            {
                "subj_idx": r.subj_idx,
                "obj_idx": r.obj_idx,
                "pred_id": r.pred_id,
                "theta_pred": r.theta_pred,
                "theta_rel": r.theta_rel,
            }
            for r in g.relations
        ],
    }


def graph_from_json(o: dict) -> SceneGraph:
    dets = tuple(_det_from_json(d) for d in o["detections"])
    rels = tuple(
        ScoredRelation(
            int(r["subj_idx"]), int(r["obj_idx"]), dets[r["subj_idx"]], dets[r["obj_idx"]],
            int(r["pred_id"]), float(r["theta_pred"]), float(r["theta_rel"]),
        )
        for r in o["relations"]
    )
    return SceneGraph(str(o["image_id"]), dets, rels)


def save_predictions(graphs: Sequence[SceneGraph], path: str | Path) -> None:
    lines = [json.dumps(graph_to_json(g)) + "\n" for g in graphs]
    Path(path).write_text("".join(lines))


def load_predictions(path: str | Path) -> list[SceneGraph]:
    graphs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if obj.get("format") != FORMAT:
                raise ValueError(f"format must be {FORMAT!r}")
            graphs.append(graph_from_json(obj))
        except (ValueError, KeyError, TypeError, IndexError, AttributeError) as exc:
            raise PredictionFormatError(f"{path}:{lineno}: malformed prediction ({exc})") from None
    return graphs
