"""Stage 1: frozen detections plus three-scale ROI-aligned visual features.

The backbone is a tiny strided CNN whose stride-8/16/32 maps each pass
through one 3x3 conv block that unifies the channel count (P3, P4, P5).
Boxes are pooled from a single pyramid level chosen by box area.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .core import BoundingBox, Detection, ImageRecord
from .metrics import iou

log = logging.getLogger(__name__)

STRIDES = (8, 16, 32)
LEVELS = (3, 4, 5)


class NotTrainedError(RuntimeError):
    """The learned detector was asked to run without trained weights."""


class UnsupportedImageError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturePyramid:
    """P3/P4/P5 maps, each ``(C, ceil(H/s), ceil(W/s))``."""

    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor

    @property
    def maps(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.p3, self.p4, self.p5)

    @property
    def channels(self) -> int:
        return self.p3.shape[0]


@dataclass(frozen=True)
class DetectorOutput:
    detections: tuple[Detection, ...]
    pyramid: FeaturePyramid
    features: torch.Tensor  # (n, D_vis), aligned with detections


# ---------------------------------------------------------------------------
# NMS


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5, class_aware: bool = True) -> list[Detection]:
    """Greedy suppression; a box survives iff its IoU with every kept box
    (of the same class when ``class_aware``) is <= ``iou_threshold``.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[Detection] = []
    for i in order:
        d = detections[i]
        if all(
            iou(d.box, k.box) <= iou_threshold
            for k in kept
            if not class_aware or k.class_id == d.class_id
        ):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# ROI align


def assign_level(box: BoundingBox, canonical: float = 16.0) -> int:
    """Pyramid level 3..5 for a box: floor(log2(sqrt(area)/canonical) + 3), clamped."""
    side = math.sqrt(max(box.area, 1e-12))
    return int(min(max(math.floor(math.log2(side / canonical) + 3), 3), 5))


def bilinear_pool(fmap: torch.Tensor, boxes: torch.Tensor, stride: int, size: int) -> torch.Tensor:
    """Sample ``fmap`` (C, H, W) at the ``size x size`` bin centres of each box.

    ``boxes`` is ``(n, 4)`` in image pixels. A pixel-space point ``x`` maps
    to feature coordinate ``x / stride - 0.5`` (cell centres sit on
    integers); coordinates are clamped to the map. Returns ``(n, C, size, size)``.
    """
    C, H, W = fmap.shape
    n = boxes.shape[0]
    if n == 0:
        return fmap.new_zeros((0, C, size, size))
    steps = (torch.arange(size, dtype=fmap.dtype) + 0.5) / size
    x1, y1, x2, y2 = (boxes[:, i : i + 1].to(fmap.dtype) for i in range(4))
    xs = (x1 + steps[None, :] * (x2 - x1)) / stride - 0.5  # (n, S)
    ys = (y1 + steps[None, :] * (y2 - y1)) / stride - 0.5
    xs = xs.clamp(0, W - 1)
    ys = ys.clamp(0, H - 1)
    x0 = xs.floor().long()
    y0 = ys.floor().long()
    x1i = (x0 + 1).clamp(max=W - 1)
    y1i = (y0 + 1).clamp(max=H - 1)
    lx = (xs - x0.to(fmap.dtype))[:, None, :]  # (n, 1, S) along x
    ly = (ys - y0.to(fmap.dtype))[:, :, None]  # (n, S, 1) along y

    def gather(yi, xi):
        # (C, n, S, S) -> (n, C, S, S)
        return fmap[:, yi[:, :, None], xi[:, None, :]].permute(1, 0, 2, 3)

    top = gather(y0, x0) * (1 - lx)[:, None] + gather(y0, x1i) * lx[:, None]
    bot = gather(y1i, x0) * (1 - lx)[:, None] + gather(y1i, x1i) * lx[:, None]
    return top * (1 - ly)[:, None] + bot * ly[:, None]


def roi_align_boxes(
    pyramid: FeaturePyramid, boxes: Sequence[BoundingBox], output_size: int = 7, canonical: float = 16.0
) -> torch.Tensor:
    """Pool each box from its assigned level; returns ``(n, C * S * S)``."""
    C = pyramid.channels
    out = pyramid.p3.new_zeros((len(boxes), C * output_size * output_size))
    if not boxes:
        return out
    levels = np.array([assign_level(b, canonical) for b in boxes])
    coords = torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float64)
    for lvl, fmap, stride in zip(LEVELS, pyramid.maps, STRIDES):
        idx = np.flatnonzero(levels == lvl)
        if idx.size == 0:
            continue
        sel = torch.from_numpy(idx)
        pooled = bilinear_pool(fmap, coords[sel], stride, output_size)
        out = out.index_copy(0, sel, pooled.reshape(len(idx), -1))
    return out


def roi_align(pyramid: FeaturePyramid, box: BoundingBox, output_size: int = 7, canonical: float = 16.0) -> torch.Tensor:
    """Flattened ``C * S * S`` pooled grid for one box."""
    if not box.is_valid():
        raise ValueError(f"degenerate box {box}")
    return roi_align_boxes(pyramid, [box], output_size, canonical)[0]


# ---------------------------------------------------------------------------
# network


def _conv(cin: int, cout: int, stride: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class Backbone(nn.Module):
    def __init__(self, channels: int = 64):
        super().__init__()
        self.stem = nn.Sequential(
            _conv(3, 16, 2), nn.ReLU(),
            _conv(16, 32, 2), nn.ReLU(),
            _conv(32, channels, 2), nn.ReLU(),
            _conv(channels, channels, 1), nn.ReLU(),  # widens the stride-8 receptive field
        )
        self.down4 = nn.Sequential(_conv(channels, channels, 2), nn.ReLU())
        self.down5 = nn.Sequential(_conv(channels, channels, 2), nn.ReLU())
        # one 3x3 conv block per level ahead of ROI align
        self.reduce = nn.ModuleList(_conv(channels, channels, 1) for _ in LEVELS)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        c3 = self.stem(x)
        c4 = self.down4(c3)
        c5 = self.down5(c4)
        return tuple(red(c) for red, c in zip(self.reduce, (c3, c4, c5)))


class DetectionHead(nn.Module):
    """Per-cell class logits (background last) and box parameters."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.cls = nn.ModuleList(nn.Conv2d(channels, num_classes + 1, 1) for _ in LEVELS)
        self.box = nn.ModuleList(nn.Conv2d(channels, 4, 1) for _ in LEVELS)

    def forward(self, maps):
        return [(c(F.relu(m)), b(F.relu(m))) for c, b, m in zip(self.cls, self.box, maps)]


class Detector(nn.Module):
    """Pluggable stage-1 detector.

    ``perfect`` returns ground truth, ``noisy`` jitters it, ``learned`` runs
    the tiny per-cell head. Every mode attaches a pyramid and pooled,
    projected visual features.
    """

    def __init__(
        self,
        num_classes: int = 12,
        channels: int = 64,
        d_vis: int = 256,
        pool_size: int = 7,
        canonical: float = 16.0,
        seed: int = 0,
        noise_sigma: float = 2.0,
        score_beta: tuple[float, float] | None = (8.0, 2.0),
        num_clutter: int = 0,
        clutter_beta: tuple[float, float] = (2.0, 8.0),
        conf_threshold: float = 0.05,
        nms_iou: float = 0.5,
        max_detections: int = 150,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.channels = channels
        self.d_vis = d_vis
        self.pool_size = pool_size
        self.canonical = canonical
        self.seed = seed
        self.noise_sigma = noise_sigma
        self.score_beta = tuple(score_beta) if score_beta is not None else None
        self.num_clutter = num_clutter
        self.clutter_beta = tuple(clutter_beta)
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.max_detections = max_detections
        rng_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.backbone = Backbone(channels)
        self.head = DetectionHead(channels, num_classes)
        self.project = nn.Linear(channels * pool_size * pool_size, d_vis)
        torch.random.set_rng_state(rng_state)
        self.trained = False

    # -- configuration -----------------------------------------------------

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channels": self.channels,
            "d_vis": self.d_vis,
            "pool_size": self.pool_size,
            "canonical": self.canonical,
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "score_beta": list(self.score_beta) if self.score_beta else None,
            "num_clutter": self.num_clutter,
            "clutter_beta": list(self.clutter_beta),
            "conf_threshold": self.conf_threshold,
            "nms_iou": self.nms_iou,
            "max_detections": self.max_detections,
        }

    def save(self, path: str | Path) -> None:
        meta = {"config": self.config(), "trained": self.trained}
        save_checkpoint(path, "detector", {"backbone": self.backbone, "head": self.head, "project": self.project}, meta)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "Detector":
        states, meta = load_checkpoint(path, "detector")
        cfg = dict(meta["config"])
        cfg.update(overrides)
        det = cls(**cfg)
        for name in ("backbone", "head", "project"):
            getattr(det, name).load_state_dict(states[name])
        det.trained = bool(meta.get("trained", False))
        return det

    # -- features ----------------------------------------------------------

    @staticmethod
    def image_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.asarray(image), dtype=dtype).permute(2, 0, 1).unsqueeze(0) / 255.0

    def extract_pyramid(self, image: np.ndarray | torch.Tensor) -> FeaturePyramid:
        """Run the backbone on an ``H x W x 3`` grid (or a ``1x3xHxW`` tensor)."""
        x = image if isinstance(image, torch.Tensor) else self.image_tensor(image, self.project.weight.dtype)
        h, w = x.shape[-2:]
        if h < 32 or w < 32:
            raise UnsupportedImageError(f"image {h}x{w} is smaller than 32x32")
        p3, p4, p5 = self.backbone(x)
        return FeaturePyramid(p3[0], p4[0], p5[0])

    def pool(self, pyramid: FeaturePyramid, boxes: Sequence[BoundingBox]) -> torch.Tensor:
        """ROI-align each box on its level, then project to ``d_vis``."""
        grid = roi_align_boxes(pyramid, boxes, self.pool_size, self.canonical)
        return self.project(grid)

    # -- detection modes ---------------------------------------------------

    def _rng(self, image_id: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}:{image_id}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def _perfect(self, record: ImageRecord) -> list[Detection]:
        return [Detection(b, int(c), 1.0) for b, c in zip(record.gt_boxes, record.gt_classes)]

    def _noisy(self, record: ImageRecord) -> list[Detection]:
        rng = self._rng(record.image_id)
        W, H = record.width, record.height
        dets = []
        for b, c in zip(record.gt_boxes, record.gt_classes):
            jit = rng.normal(0.0, self.noise_sigma, size=4) if self.noise_sigma > 0 else np.zeros(4)
            x1, y1, x2, y2 = np.array(b.as_tuple()) + jit
            x1, x2 = float(np.clip(min(x1, x2 - 1), 0, W - 1)), float(np.clip(max(x2, x1 + 1), 1, W))
            y1, y2 = float(np.clip(min(y1, y2 - 1), 0, H - 1)), float(np.clip(max(y2, y1 + 1), 1, H))
            score = float(rng.beta(*self.score_beta)) if self.score_beta else 1.0
            dets.append(Detection(BoundingBox(x1, y1, x2, y2), int(c), score))
        for _ in range(self.num_clutter):
            w, h = rng.uniform(6, 40, size=2)
            x, y = rng.uniform(0, W - w), rng.uniform(0, H - h)
            score = float(rng.beta(*self.clutter_beta))
            dets.append(Detection(BoundingBox(float(x), float(y), float(x + w), float(y + h)),
                                  int(rng.integers(self.num_classes)), score))
        return nms(dets, self.nms_iou)

    def _decode(self, outputs, width: int, height: int) -> list[Detection]:
        dets = []
        for (cls_logits, box_params), stride in zip(outputs, STRIDES):
            probs = torch.softmax(cls_logits[0], dim=0)[:-1]  # drop background
            score, cls = probs.max(dim=0)
            ys, xs = torch.nonzero(score > self.conf_threshold, as_tuple=True)
            for y, x in zip(ys.tolist(), xs.tolist()):
                dx, dy, lw, lh = box_params[0, :, y, x].tolist()
                cx = (x + 1 / (1 + math.exp(-dx))) * stride
                cy = (y + 1 / (1 + math.exp(-dy))) * stride
                bw = math.exp(min(lw, 6.0)) * stride
                bh = math.exp(min(lh, 6.0)) * stride
                box = BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clip(width, height)
                if box.width >= 1 and box.height >= 1:
                    dets.append(Detection(box, int(cls[y, x]), float(score[y, x])))
        return nms(dets, self.nms_iou)[: self.max_detections]

    @torch.no_grad()
    def detect_boxes(self, record: ImageRecord, mode: str = "perfect") -> tuple[list[Detection], FeaturePyramid]:
        """Final (post-NMS) detections and the pyramid, without pooling."""
        if record.image is None:
            raise ValueError(f"image {record.image_id!r} has no pixel payload")
        if mode == "learned" and not self.trained:
            raise NotTrainedError("learned mode needs trained detector weights (run train-detector)")
        x = self.image_tensor(record.image, self.project.weight.dtype)
        if x.shape[-2] < 32 or x.shape[-1] < 32:
            raise UnsupportedImageError(f"image {tuple(x.shape[-2:])} is smaller than 32x32")
        maps = self.backbone(x)
        pyramid = FeaturePyramid(maps[0][0], maps[1][0], maps[2][0])
        if mode == "perfect":
            dets = self._perfect(record)
        elif mode == "noisy":
            dets = self._noisy(record)
        elif mode == "learned":
            dets = self._decode(self.head(maps), record.width, record.height)
        else:
            raise ValueError(f"unknown detector mode {mode!r}")
        return dets, pyramid

    @torch.no_grad()
    def detect(self, record: ImageRecord, mode: str = "perfect") -> DetectorOutput:
        dets, pyramid = self.detect_boxes(record, mode)
        features = self.pool(pyramid, [d.box for d in dets])
        return DetectorOutput(tuple(dets), pyramid, features)


# ---------------------------------------------------------------------------
# training the tiny detector


def _targets(record: ImageRecord, num_classes: int, canonical: float):
    """Per-level class and box targets; a cell holds the last-drawn object."""
    out = []
    for lvl, stride in zip(LEVELS, STRIDES):
        h, w = math.ceil(record.height / stride), math.ceil(record.width / stride)
        cls = torch.full((h, w), num_classes, dtype=torch.long)
        box = torch.zeros((4, h, w))
        out.append((cls, box))
    for b, c in zip(record.gt_boxes, record.gt_classes):
        lvl = assign_level(b, canonical)
        stride = STRIDES[lvl - 3]
        cx, cy = b.center
        gx, gy = int(cx // stride), int(cy // stride)
        cls, box = out[lvl - 3]
        gy, gx = min(gy, cls.shape[0] - 1), min(gx, cls.shape[1] - 1)
        cls[gy, gx] = c
        fx = min(max(cx / stride - gx, 1e-3), 1 - 1e-3)
        fy = min(max(cy / stride - gy, 1e-3), 1 - 1e-3)
        box[:, gy, gx] = torch.tensor(
            [math.log(fx / (1 - fx)), math.log(fy / (1 - fy)), math.log(b.width / stride), math.log(b.height / stride)]
        )
    return out


def _mirror(record: ImageRecord) -> ImageRecord:
    w = record.width
    boxes = tuple(BoundingBox(w - b.x2, b.y1, w - b.x1, b.y2) for b in record.gt_boxes)
    return ImageRecord(record.image_id, record.width, record.height, boxes, record.gt_classes, (), None)


def detection_loss(outputs, targets, num_classes: int, bg_weight: float = 0.1) -> torch.Tensor:
    """Cell-wise cross-entropy (down-weighted background) plus smooth-L1 on positive cells."""
    weight = torch.ones(num_classes + 1, dtype=outputs[0][0].dtype)
    weight[-1] = bg_weight
    total = outputs[0][0].new_zeros(())
    for (cls_logits, box_params), (cls_t, box_t) in zip(outputs, targets):
        total = total + F.cross_entropy(cls_logits, cls_t, weight=weight, reduction="sum")
        pos = cls_t != num_classes
        if pos.any():
            pred = box_params.permute(0, 2, 3, 1)[pos]
            tgt = box_t.permute(0, 2, 3, 1)[pos].to(pred.dtype)
            total = total + F.smooth_l1_loss(pred, tgt, reduction="sum")
    return total


def train_detector(
    detector: Detector,
    dataset: Sequence[ImageRecord],
    epochs: int = 15,
    lr: float = 3e-3,
    batch_size: int = 8,
    seed: int = 0,
    checkpoint: str | Path | None = None,
    augment: bool = True,
    decay_every: int = 5,
) -> list[float]:
    """Fit backbone and head on ``dataset``; returns mean loss per epoch.

    ``augment`` mirrors each training image left-right with probability 1/2.
    The learning rate halves every ``decay_every`` epochs (0 keeps it fixed).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train the detector on an empty dataset")
    params = list(detector.backbone.parameters()) + list(detector.head.parameters())
    opt = torch.optim.Adam(params, lr=lr) if lr > 0 else None
    sched = torch.optim.lr_scheduler.StepLR(opt, decay_every, 0.5) if opt is not None and decay_every > 0 else None
    images = torch.cat([detector.image_tensor(r.image) for r in dataset]).to(detector.project.weight.dtype)
    targets = [_targets(r, detector.num_classes, detector.canonical) for r in dataset]
    if augment:
        # horizontal flips: class and box targets are mirror-symmetric
        flipped = [_targets(_mirror(r), detector.num_classes, detector.canonical) for r in dataset]
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            flip = rng.random(len(idx)) < 0.5 if augment else np.zeros(len(idx), dtype=bool)
            batch = images[idx]
            if flip.any():
                batch = batch.clone()
                batch[flip] = batch[flip].flip(-1)
            outputs = detector.head(detector.backbone(batch))
            src = [flipped[i] if f else targets[i] for i, f in zip(idx, flip)]
            batch_t = [(torch.stack([t[l][0] for t in src]), torch.stack([t[l][1] for t in src])) for l in range(3)]
            loss = detection_loss(outputs, batch_t, detector.num_classes) / len(idx)
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if sched is not None:
            sched.step()
        log.info("detector epoch %d loss %.4f", epoch + 1, history[-1])
    detector.trained = True
    if checkpoint is not None:
        detector.save(checkpoint)
    return history
