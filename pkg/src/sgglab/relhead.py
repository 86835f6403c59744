"""Stage 2: the efficient prototype relation head, its training loop and the pipeline.

Node representations fuse pooled visual features with class embeddings.
A subject/object pair is fused by one linear layer on the concatenation,
joined with a 12-d spatial vector (and optional union-box features), and
scored against one learned prototype per predicate plus background.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .core import BoundingBox, Detection, ImageRecord, SceneGraph, ScoredRelation
from .detector import Detector, DetectorOutput
from .metrics import iou_matrix
from .selection import DEFAULT_THETA, pair_index_arrays

log = logging.getLogger(__name__)

SPATIAL_DIM = 12


@dataclass(frozen=True)
class AblationFlags:
    use_text: bool = True
    use_visual: bool = True
    use_spatial: bool = True
    use_union: bool = False

    def __post_init__(self):
        if not (self.use_text or self.use_visual):
            raise ValueError("at least one of text/visual features must be enabled")

    @property
    def label(self) -> str:
        return "".join(c for c, on in zip("TVSU", asdict(self).values()) if on)

    @classmethod
    def parse(cls, label: str) -> "AblationFlags":
        label = label.upper()
        unknown = set(label) - set("TVSU")
        if unknown:
            raise ValueError(f"unknown ablation letters {sorted(unknown)}")
        return cls(*(c in label for c in "TVSU"))


# Rows of the feature-source ablation grid.
ABLATION_GRID = ("TVSU", "TVS", "TVU", "TV", "T")


# ---------------------------------------------------------------------------
# spatial encoding


def spatial_features(subj: np.ndarray, obj: np.ndarray, width: float, height: float) -> np.ndarray:
    """12-d spatial vectors for ``(m, 4)`` subject and object box arrays.

    Layout: subject box / image size (4), object box / image size (4),
    centre offset object-minus-subject / image size (2),
    log(area_s / area_o) (1), IoU (1).
    """
    subj = np.asarray(subj, dtype=np.float64).reshape(-1, 4)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 4)
    scale = np.array([width, height, width, height], dtype=np.float64)
    s_c = 0.5 * (subj[:, :2] + subj[:, 2:])
    o_c = 0.5 * (obj[:, :2] + obj[:, 2:])
    area_s = (subj[:, 2] - subj[:, 0]) * (subj[:, 3] - subj[:, 1])
    area_o = (obj[:, 2] - obj[:, 0]) * (obj[:, 3] - obj[:, 1])
    iw = np.clip(np.minimum(subj[:, 2], obj[:, 2]) - np.maximum(subj[:, 0], obj[:, 0]), 0, None)
    ih = np.clip(np.minimum(subj[:, 3], obj[:, 3]) - np.maximum(subj[:, 1], obj[:, 1]), 0, None)
    inter = iw * ih
    pair_iou = inter / (area_s + area_o - inter)
    return np.concatenate(
        [
            subj / scale,
            obj / scale,
            (o_c - s_c) / scale[:2],
            np.log(area_s / area_o)[:, None],
            pair_iou[:, None],
        ],
        axis=1,
    )


def encode_spatial(subj: BoundingBox, obj: BoundingBox, image_size: tuple[float, float]) -> np.ndarray:
    width, height = image_size
    return spatial_features(np.array(subj.as_tuple()), np.array(obj.as_tuple()), width, height)[0]


# ---------------------------------------------------------------------------
# text embeddings


def pseudo_embeddings(names: Sequence[str], dim: int = 64) -> np.ndarray:
    """Unit vectors seeded by a hash of each class name (stable across runs)."""
    rows = []
    for name in names:
        seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
        v = np.random.default_rng(seed).normal(size=dim)
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows)


def load_embedding_table(path: str | Path, names: Sequence[str]) -> np.ndarray:
    """Read ``{"name": [floats...]}`` JSON; every class name must be present."""
    table = json.loads(Path(path).read_text())
    missing = [n for n in names if n not in table]
    if missing:
        raise KeyError(f"embedding table lacks classes {missing}")
    return np.array([table[n] for n in names], dtype=np.float64)


# ---------------------------------------------------------------------------
# the head


class RelationHead(nn.Module):
    def __init__(
        self,
        class_names: Sequence[str],
        num_predicates: int,
        d_vis: int = 256,
        d_txt: int = 64,
        d_node: int = 256,
        d_edge: int = 512,
        flags: AblationFlags = AblationFlags(),
        fusion: str = "linear",
        graph_constraint: bool = True,
        seed: int = 0,
        embeddings: np.ndarray | None = None,
    ):
        super().__init__()
        if fusion not in ("linear", "legacy"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.class_names = list(class_names)
        self.num_classes = len(self.class_names)
        self.num_predicates = num_predicates
        self.background = num_predicates
        self.d_vis, self.d_txt, self.d_node, self.d_edge = d_vis, d_txt, d_node, d_edge
        self.flags = flags
        self.fusion = fusion
        self.graph_constraint = graph_constraint
        self.seed = seed
        if embeddings is None:
            embeddings = pseudo_embeddings(self.class_names, d_txt)
        if embeddings.shape != (self.num_classes, d_txt):
            raise ValueError(f"embedding table shape {embeddings.shape} != {(self.num_classes, d_txt)}")

        rng_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.register_buffer("embed", torch.as_tensor(embeddings, dtype=torch.float32))
        self.node_proj = nn.Linear(d_vis + d_txt, d_node)
        fused = d_node
        if fusion == "linear":
            self.fuse = nn.Linear(2 * d_node, d_edge)
            fused = d_edge
        edge_in = fused + SPATIAL_DIM + (d_vis if flags.use_union else 0)
        self.edge_proj = nn.Linear(edge_in, d_edge)
        self.prototypes = nn.Parameter(torch.randn(num_predicates + 1, d_edge) / d_edge**0.5)
        self.proto_bias = nn.Parameter(torch.zeros(num_predicates + 1))
        torch.random.set_rng_state(rng_state)

    def config(self) -> dict:
        return {
            "class_names": self.class_names,
            "num_predicates": self.num_predicates,
            "d_vis": self.d_vis,
            "d_txt": self.d_txt,
            "d_node": self.d_node,
            "d_edge": self.d_edge,
            "flags": asdict(self.flags),
            "fusion": self.fusion,
            "graph_constraint": self.graph_constraint,
            "seed": self.seed,
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"config": self.config(), "extra": extra or {}}
        save_checkpoint(path, "relhead", {"head": self}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "RelationHead":
        states, meta = load_checkpoint(path, "relhead")
        cfg = dict(meta["config"])
        cfg["flags"] = AblationFlags(**cfg["flags"])
        state = states["head"]
        head = cls(embeddings=state["embed"].double().numpy(), **cfg)
        head.load_state_dict(state)
        return head

    # -- building blocks -------------------------------------------------

    def encode_node(self, visual: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        """Linear([visual ; embed(class)]); disabled channels are zeroed."""
        class_ids = torch.as_tensor(class_ids, dtype=torch.long)
        if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= self.num_classes):
            raise KeyError(f"class id outside [0, {self.num_classes})")
        dtype = self.node_proj.weight.dtype
        visual = visual.to(dtype)
        text = self.embed[class_ids].to(dtype)
        if not self.flags.use_visual:
            visual = torch.zeros_like(visual)
        if not self.flags.use_text:
            text = torch.zeros_like(text)
        return self.node_proj(torch.cat([visual, text], dim=-1))

    def fuse_pair(self, s: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
        if s.shape[-1] != o.shape[-1]:
            raise ValueError(f"node dims differ: {s.shape[-1]} vs {o.shape[-1]}")
        if self.fusion == "legacy":
            return F.relu(s + o) - (s - o) ** 2
        return self.fuse(torch.cat([s, o], dim=-1))

    def edge(self, pair: torch.Tensor, spatial: torch.Tensor, union: torch.Tensor | None = None) -> torch.Tensor:
        spatial = spatial.to(pair.dtype)
        if not self.flags.use_spatial:
            spatial = torch.zeros_like(spatial)
        parts = [pair, spatial]
        if self.flags.use_union:
            if union is None:
                raise ValueError("union features required when use_union is on")
            parts.append(union.to(pair.dtype))
        return F.relu(self.edge_proj(torch.cat(parts, dim=-1)))

    def logits_from_edge(self, edge: torch.Tensor) -> torch.Tensor:
        return edge @ self.prototypes.T + self.proto_bias

    def score_predicates(
        self, pair: torch.Tensor, spatial: torch.Tensor, union: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Softmax over predicates plus background (last column)."""
        return torch.softmax(self.logits_from_edge(self.edge(pair, spatial, union)), dim=-1)

    def pair_logits(
        self,
        visual: torch.Tensor,
        class_ids: torch.Tensor,
        subj_idx: torch.Tensor,
        obj_idx: torch.Tensor,
        spatial: torch.Tensor,
        union: torch.Tensor | None = None,
    ) -> torch.Tensor:
        nodes = self.encode_node(visual, class_ids)
        if self.fusion == "legacy":
            pair = self.fuse_pair(nodes[subj_idx], nodes[obj_idx])
            return self.logits_from_edge(self.edge(pair, spatial, union))
        # Linear fusion feeds straight into edge_proj, so the pair term splits
        # into per-node products: W_e [W_s s + W_o o + b] = (W_e W_s s) + (W_e W_o o) + W_e b.
        # Same function as fuse_pair -> edge, but O(n) matmuls instead of O(n^2).
        d = self.d_node
        w_edge = self.edge_proj.weight
        w_pair = w_edge[:, : self.d_edge]
        n = nodes.shape[0]
        halves = torch.cat([nodes @ self.fuse.weight[:, :d].T, nodes @ self.fuse.weight[:, d:].T]) @ w_pair.T
        subj_part, obj_part = halves[:n], halves[n:]
        bias = self.edge_proj.bias + w_pair @ self.fuse.bias
        spatial = spatial.to(nodes.dtype)
        if not self.flags.use_spatial:
            spatial = torch.zeros_like(spatial)
        pre = subj_part[subj_idx] + obj_part[obj_idx] + spatial @ w_edge[:, self.d_edge : self.d_edge + SPATIAL_DIM].T + bias
        if self.flags.use_union:
            if union is None:
                raise ValueError("union features required when use_union is on")
            pre = pre + union.to(nodes.dtype) @ w_edge[:, self.d_edge + SPATIAL_DIM :].T
        return self.logits_from_edge(F.relu(pre))


# ---------------------------------------------------------------------------
# relation scoring


def score_relations(
    detections: Sequence[Detection],
    subj_idx: np.ndarray,
    obj_idx: np.ndarray,
    probs: np.ndarray,
    graph_constraint: bool = True,
    keep_top: int | None = None,
) -> list[ScoredRelation]:
    """Rank pair predictions by theta_rel = theta_obj * theta_pred * theta_subj.

    ``probs`` is ``(m, P)`` or ``(m, P + 1)`` (background column ignored).
    With the graph constraint each pair contributes only its argmax
    predicate; otherwise every predicate of every pair is ranked.
    """
    subj_idx = np.asarray(subj_idx, dtype=np.int64)
    obj_idx = np.asarray(obj_idx, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if len(subj_idx) == 0:
        return []
    num_pred = probs.shape[1]
    scores = np.array([d.score for d in detections], dtype=np.float64)
    if graph_constraint:
        pred = probs.argmax(axis=1)
        theta = probs[np.arange(len(pred)), pred]
        si, oi = subj_idx, obj_idx
    else:
        si = np.repeat(subj_idx, num_pred)
        oi = np.repeat(obj_idx, num_pred)
        pred = np.tile(np.arange(num_pred), len(subj_idx))
        theta = probs.reshape(-1)
    theta_rel = scores[oi] * theta * scores[si]
    order = np.lexsort((pred, oi, si, -theta_rel))
    if keep_top is not None:
        order = order[:keep_top]
    return [
        ScoredRelation(
            int(si[n]), int(oi[n]), detections[si[n]], detections[oi[n]],
            int(pred[n]), float(theta[n]), float(theta_rel[n]),
        )
        for n in order
    ]


# ---------------------------------------------------------------------------
# GT matching and the loss


def pair_labels(
    detections: Sequence[Detection],
    record: ImageRecord,
    subj_idx: np.ndarray,
    obj_idx: np.ndarray,
    background: int,
    iou_thresh: float = 0.5,
) -> np.ndarray:
    """Predicate label per proposal pair; ``background`` where no GT triplet matches.

    A proposal stands for a GT object when classes agree and IoU >= 0.5;
    a pair takes the predicate of the first GT triplet matched on both ends.
    """
    labels = np.full(len(subj_idx), background, dtype=np.int64)
    if not detections or not record.gt_relations:
        return labels
    det_boxes = np.array([d.box.as_tuple() for d in detections])
    gt_boxes = np.array([b.as_tuple() for b in record.gt_boxes])
    same = np.array([[d.class_id == c for c in record.gt_classes] for d in detections])
    hit = (iou_matrix(det_boxes, gt_boxes) >= iou_thresh) & same  # (n_det, n_gt)
    lookup = {(i, j): n for n, (i, j) in enumerate(zip(subj_idx.tolist(), obj_idx.tolist()))}
    for t in reversed(record.gt_relations):
        for i in np.flatnonzero(hit[:, t.subj_idx]):
            for j in np.flatnonzero(hit[:, t.obj_idx]):
                n = lookup.get((int(i), int(j)))
                if n is not None:
                    labels[n] = t.pred_id
    return labels


def sample_pairs(labels: np.ndarray, background: int, rng: np.random.Generator, bg_ratio: int = 3) -> np.ndarray:
    """All foreground pairs plus up to ``bg_ratio`` background pairs per foreground one."""
    fg = np.flatnonzero(labels != background)
    bg = np.flatnonzero(labels == background)
    n_bg = min(len(bg), bg_ratio * max(len(fg), 1))
    if n_bg < len(bg):
        bg = rng.choice(bg, size=n_bg, replace=False)
    return np.sort(np.concatenate([fg, bg]))


def relation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor | None:
    """Cross-entropy over predicates + background; the only training term.

    Returns ``None`` for an empty batch so the caller can skip it.
    """
    if logits.shape[0] == 0:
        return None
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


# ---------------------------------------------------------------------------
# pipeline


def topk_indices(detections: Sequence[Detection], k: int) -> list[int]:
    if k < 1:
        raise ValueError(f"proposal budget must be >= 1, got {k}")
    return sorted(range(len(detections)), key=lambda i: -detections[i].score)[:k]


class Pipeline:
    """detect -> (NMS inside the detector) -> top-k -> pool -> encode -> pairs -> score -> rank."""

    stages = ("detector", "pooling", "relation", "ranking")

    def __init__(self, detector: Detector, head: RelationHead, mode: str = "perfect", keep_top: int | None = None):
        self.detector = detector.eval()
        self.head = head.eval()
        self.mode = mode
        self.keep_top = keep_top
        self.last_timings: dict[str, float] = {}
        self.last_pair_count = 0

    @property
    def graph_constraint(self) -> bool:
        return self.head.graph_constraint

    @torch.no_grad()
    def detect(self, record: ImageRecord) -> DetectorOutput:
        return self.detector.detect(record, self.mode)

    @torch.no_grad()
    def forward(
        self, record: ImageRecord, k_budget: int = DEFAULT_THETA, stage_one=None, keep_top: int | None = None
    ) -> SceneGraph:
        """Scene graph for one image; ``stage_one`` reuses cached ``detect_boxes`` output.

        ``keep_top`` (default: the pipeline's setting) truncates the ranked
        relation list; evaluation at K <= keep_top is unaffected.
        """
        t0 = time.perf_counter()
        if stage_one is None:
            dets, pyramid = self.detector.detect_boxes(record, self.mode)
        else:
            dets, pyramid = stage_one
        t1 = time.perf_counter()
        keep = topk_indices(dets, k_budget)
        props = [dets[i] for i in keep]
        visual = self.detector.pool(pyramid, [d.box for d in props])
        t2 = time.perf_counter()
        n = len(props)
        si, oi = pair_index_arrays(n)
        self.last_pair_count = len(si)
        probs = np.zeros((0, self.head.num_predicates + 1))
        if len(si):
            boxes = np.array([d.box.as_tuple() for d in props])
            spatial = torch.as_tensor(
                spatial_features(boxes[si], boxes[oi], record.width, record.height), dtype=torch.float32
            )
            union = None
            if self.head.flags.use_union:
                ub = np.concatenate([np.minimum(boxes[si, :2], boxes[oi, :2]), np.maximum(boxes[si, 2:], boxes[oi, 2:])], 1)
                union = self.detector.pool(pyramid, [BoundingBox(*map(float, b)) for b in ub])
            classes = torch.tensor([d.class_id for d in props], dtype=torch.long)
            logits = self.head.pair_logits(
                visual, classes, torch.from_numpy(si), torch.from_numpy(oi), spatial, union
            )
            probs = torch.softmax(logits, dim=-1).double().numpy()
        t3 = time.perf_counter()
        keep_arr = np.asarray(keep, dtype=np.int64)
        rels = score_relations(
            dets,
            keep_arr[si] if len(si) else si,
            keep_arr[oi] if len(oi) else oi,
            probs[:, : self.head.num_predicates],
            self.head.graph_constraint,
            self.keep_top if keep_top is None else keep_top,
        )
        graph = SceneGraph(record.image_id, tuple(dets), tuple(rels))
        t4 = time.perf_counter()
        self.last_timings = {
            "detector": t1 - t0,
            "pooling": t2 - t1,
            "relation": t3 - t2,
            "ranking": t4 - t3,
            "total": t4 - t0,
        }
        return graph


# ---------------------------------------------------------------------------
# training


@dataclass
class _Cached:
    features: torch.Tensor
    classes: torch.Tensor
    subj: torch.Tensor
    obj: torch.Tensor
    spatial: torch.Tensor
    union: torch.Tensor | None
    labels: np.ndarray


@torch.no_grad()
def cache_stage_one(
    detector: Detector,
    records: Sequence[ImageRecord],
    mode: str,
    theta: int,
    background: int,
    use_union: bool,
) -> list[_Cached]:
    """Run the frozen detector once per image and keep what stage 2 needs."""
    out = []
    for rec in records:
        dets, pyramid = detector.detect_boxes(rec, mode)
        keep = topk_indices(dets, theta)
        props = [dets[i] for i in keep]
        si, oi = pair_index_arrays(len(props))
        boxes = np.array([d.box.as_tuple() for d in props]).reshape(-1, 4)
        union = None
        if use_union and len(si):
            ub = np.concatenate([np.minimum(boxes[si, :2], boxes[oi, :2]), np.maximum(boxes[si, 2:], boxes[oi, 2:])], 1)
            union = detector.pool(pyramid, [BoundingBox(*map(float, b)) for b in ub]).float()
        out.append(
            _Cached(
                features=detector.pool(pyramid, [d.box for d in props]).float(),
                classes=torch.tensor([d.class_id for d in props], dtype=torch.long),
                subj=torch.from_numpy(si),
                obj=torch.from_numpy(oi),
                spatial=torch.as_tensor(
                    spatial_features(boxes[si], boxes[oi], rec.width, rec.height), dtype=torch.float32
                ).reshape(-1, SPATIAL_DIM),
                union=union,
                labels=pair_labels(props, rec, si, oi, background),
            )
        )
    return out


def _param_snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class FreezeViolation(RuntimeError):
    pass


def train_relhead(
    head: RelationHead,
    detector: Detector,
    dataset: Sequence[ImageRecord],
    mode: str = "perfect",
    epochs: int = 20,
    lr: float = 1e-3,
    theta: int = DEFAULT_THETA,
    batch_size: int = 8,
    optimizer: str = "sgd",
    momentum: float = 0.9,
    bg_ratio: int = 3,
    schedule: str = "cosine",
    seed: int = 0,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
) -> list[float]:
    """Train the relation head with the detector frozen; returns mean loss per epoch.

    Stage-1 outputs never change during training, so they are computed once.
    """
    if detector is None:
        raise ValueError("train_relhead needs a detector (use perfect mode for the GT stub)")
    before = _param_snapshot(detector)
    detector.requires_grad_(False)
    cached = cache_stage_one(detector, dataset, mode, theta, head.background, head.flags.use_union)
    params = [p for p in head.parameters() if p.requires_grad]
    if optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    elif optimizer == "adam":
        opt = torch.optim.Adam(params, lr=lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    steps_per_epoch = -(-len(cached) // batch_size)
    if schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs * steps_per_epoch, 1))
    elif schedule == "constant":
        sched = None
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    rng = np.random.default_rng(seed)
    head.train()
    history = []
    log_lines = []
    for epoch in range(epochs):
        order = rng.permutation(len(cached))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [cached[i] for i in order[start : start + batch_size]]
            feats, classes, subj, obj, spatial, union, labels = [], [], [], [], [], [], []
            offset = 0
            for c in batch:
                if len(c.labels) == 0:
                    continue
                pick = sample_pairs(c.labels, head.background, rng, bg_ratio)
                sel = torch.from_numpy(pick)
                feats.append(c.features)
                classes.append(c.classes)
                subj.append(c.subj[sel] + offset)
                obj.append(c.obj[sel] + offset)
                spatial.append(c.spatial[sel])
                if c.union is not None:
                    union.append(c.union[sel])
                labels.append(c.labels[pick])
                offset += len(c.classes)
            if not labels:
                continue
            logits = head.pair_logits(
                torch.cat(feats), torch.cat(classes), torch.cat(subj), torch.cat(obj),
                torch.cat(spatial), torch.cat(union) if union else None,
            )
            loss = relation_loss(logits, np.concatenate(labels))
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log_lines.append(json.dumps({"epoch": epoch + 1, "loss": history[-1], "lr": opt.param_groups[0]["lr"]}))
        log.info("relhead epoch %d loss %.4f", epoch + 1, history[-1])
    head.eval()
    detector.requires_grad_(True)
    after = _param_snapshot(detector)
    if any(not torch.equal(before[k], after[k]) for k in before):
        raise FreezeViolation("detector parameters changed while training the relation head")
    if checkpoint is not None:
        head.save(checkpoint, {"epochs": epochs, "lr": lr, "theta": theta, "history": history})
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    return history
