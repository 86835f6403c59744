import numpy as np
import pytest
import torch

from sgglab.core import BoundingBox, Detection, ImageRecord, RelationTriplet, ScoredRelation, SceneGraph

torch.set_num_threads(1)


def random_box(rng, size=100.0, integer=False):
    x1, y1 = rng.uniform(0, size * 0.8, 2)
    w, h = rng.uniform(2, size * 0.4, 2)
    box = [x1, y1, min(x1 + w, size), min(y1 + h, size)]
    if integer:
        box = [float(int(v)) for v in box]
        if box[2] <= box[0]:
            box[2] = box[0] + 1
        if box[3] <= box[1]:
            box[3] = box[1] + 1
    return BoundingBox(*box)


def random_fixture(rng, image_id="img", max_objects=10, max_rels=20, num_classes=3, num_preds=4):
    """Random GT record plus a ranked prediction graph that partly overlaps it."""
    n = int(rng.integers(2, max_objects + 1))
    boxes = tuple(random_box(rng) for _ in range(n))
    classes = tuple(int(c) for c in rng.integers(num_classes, size=n))
    rels = []
    for _ in range(int(rng.integers(0, max_rels + 1))):
        s, o = rng.choice(n, 2, replace=False)
        rels.append(RelationTriplet(int(s), int(rng.integers(num_preds)), int(o)))
    rec = ImageRecord(image_id, 100, 100, boxes, classes, tuple(rels))

    dets = []
    for b, c in zip(boxes, classes):
        # jitter some boxes, relabel some classes, add a few extras
        jit = rng.normal(0, 2.0, 4) if rng.random() < 0.5 else np.zeros(4)
        x1, y1, x2, y2 = np.array(b.as_tuple()) + jit
        box = BoundingBox(float(x1), float(y1), float(max(x2, x1 + 1)), float(max(y2, y1 + 1)))
        cls = c if rng.random() < 0.8 else int(rng.integers(num_classes))
        dets.append(Detection(box, cls, float(rng.choice([0.5, 0.7, 0.9, rng.random()]))))
    for _ in range(int(rng.integers(0, 3))):
        dets.append(Detection(random_box(rng), int(rng.integers(num_classes)), float(rng.random())))
    preds = []
    for _ in range(int(rng.integers(0, 2 * max_rels + 1))):
        if rels and rng.random() < 0.6:
            t = rels[int(rng.integers(len(rels)))]
            s, o = t.subj_idx, t.obj_idx
            p = t.pred_id if rng.random() < 0.7 else int(rng.integers(num_preds))
        else:
            s, o = (int(v) for v in rng.choice(len(dets), 2, replace=False))
            p = int(rng.integers(num_preds))
        # coarse theta grid so ties occur
        preds.append(ScoredRelation.build(s, o, dets[s], dets[o], p, float(rng.choice([0.25, 0.5, 1.0]))))
    return SceneGraph.build(image_id, dets, preds), rec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grad_rel_errors(module, loss_fn, rng, per_tensor=12, h=1e-4, min_h=1e-8):
    """Largest relative error between autograd and central differences, per parameter tensor.

    ``loss_fn()`` must rebuild the scalar loss from the module's current
    parameters. Checks ``per_tensor`` random coordinates of every trainable
    tensor (all of them when the tensor is smaller).

    The difference quotient is only meaningful inside one linear piece of the
    ReLU network: the sign pattern of every Linear/Conv output is recorded at
    x-h, x and x+h and the step is halved until the patterns agree.
    """
    import torch
    from torch import nn

    patterns = []

    def hook(_, __, out):
        patterns.append(out > 0)

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, (nn.Linear, nn.Conv2d))]

    def evaluate():
        patterns.clear()
        with torch.no_grad():
            v = float(loss_fn())
        return v, list(patterns)

    def same(a, b):
        return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))

    try:
        module.zero_grad()
        loss_fn().backward()
        out = {}
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            flat = p.data.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            analytic = p.grad.view(-1)[idx].numpy().copy()
            numeric = np.empty_like(analytic)
            for j, i in enumerate(idx):
                x0 = flat[i].item()
                _, base = evaluate()
                step = h
                while True:
                    flat[i] = x0 + step
                    fp, pp = evaluate()
                    flat[i] = x0 - step
                    fm, pm = evaluate()
                    flat[i] = x0
                    if (same(pp, base) and same(pm, base)) or step / 2 < min_h:
                        break
                    step /= 2
                numeric[j] = (fp - fm) / (2 * step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
            out[name] = float(np.max(np.abs(analytic - numeric) / denom))
    finally:
        for hd in handles:
            hd.remove()
    return out


def masking_violations(head, rng, n=4, size=128):
    """Ablation masks that leak: a disabled cue must not move the logits.

    Returns the names of the violated properties (empty when all hold).
    """
    from sgglab.relhead import spatial_features
    from sgglab.selection import pair_index_arrays

    dtype = next(head.parameters()).dtype
    si, oi = pair_index_arrays(n)
    union = torch.from_numpy(rng.normal(size=(len(si), head.d_vis))).to(dtype)

    def logits(vis, cls, boxes):
        sp = torch.from_numpy(spatial_features(boxes[si], boxes[oi], size, size))
        with torch.no_grad():
            return head.pair_logits(vis, torch.tensor(cls), torch.from_numpy(si), torch.from_numpy(oi), sp,
                                    union if head.flags.use_union else None)

    boxes = np.array([random_box(rng, size).as_tuple() for _ in range(n)])
    boxes2 = np.array([random_box(rng, size).as_tuple() for _ in range(n)])
    vis = torch.from_numpy(rng.normal(size=(n, head.d_vis))).to(dtype)
    vis2 = torch.from_numpy(rng.normal(size=(n, head.d_vis))).to(dtype)
    cls = list(rng.integers(head.num_classes, size=n))
    cls2 = [(c + 1) % head.num_classes for c in cls]
    base = logits(vis, cls, boxes)
    bad = []
    if not head.flags.use_visual and not torch.equal(logits(vis2, cls, boxes), base):
        bad.append("V off but visual features change logits")
    if not head.flags.use_text and not torch.equal(logits(vis, cls2, boxes), base):
        bad.append("T off but class labels change logits")
    if not head.flags.use_spatial and not torch.equal(logits(vis, cls, boxes2), base):
        bad.append("S off but box geometry changes logits")
    return bad


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
