"""Latency benchmarking, parameter counting and the experiment drivers behind the CLI."""

from __future__ import annotations

import gc
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .core import FORMAT, ImageRecord
from .metrics import DEFAULT_KS, report_from_results
from .selection import DcsCurve, sample_curve

STAGES = ("detector", "pooling", "relation", "ranking")


def _summary(samples_s: Sequence[float]) -> dict[str, float]:
    ms = np.asarray(samples_s, dtype=np.float64) * 1000.0
    return {
        "mean": float(ms.mean()),
        "p50": float(np.percentile(ms, 50)),
        "p95": float(np.percentile(ms, 95)),
        "min": float(ms.min()),
        "max": float(ms.max()),
    }


@dataclass
class LatencyStats:
    """Per-stage and end-to-end wall times in milliseconds (batch size 1)."""

    end_to_end: dict[str, float]
    stages: dict[str, dict[str, float]]
    warmup: int
    reps: int
    k_budget: int | None = None
    pair_counts: list[int] = field(default_factory=list)
    batch_size: int = 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["format"] = FORMAT
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LatencyStats":
        d = {k: v for k, v in d.items() if k not in ("format", "config_hash")}
        return cls(**d)


def measure_latency(
    pipeline,
    images: Sequence[ImageRecord],
    warmup: int = 10,
    reps: int = 50,
    k_budget: int = 100,
) -> LatencyStats:
    """Time ``pipeline.forward`` one image at a time, cycling through ``images``.

    Warmup calls are discarded. Stage times come from the pipeline's own
    monotonic-clock instrumentation (``last_timings``).
    """
    if not images:
        raise ValueError("measure_latency needs at least one image")
    torch.set_grad_enabled(False)
    try:
        for i in range(warmup):
            pipeline.forward(images[i % len(images)], k_budget)
        gc_was_enabled = gc.isenabled()
        gc.disable()
        totals, pairs = [], []
        per_stage: dict[str, list[float]] = {s: [] for s in STAGES}
        try:
            for i in range(reps):
                start = time.perf_counter()
                pipeline.forward(images[i % len(images)], k_budget)
                totals.append(time.perf_counter() - start)
                timings = getattr(pipeline, "last_timings", {}) or {}
                for s in STAGES:
                    if s in timings:
                        per_stage[s].append(timings[s])
                pairs.append(int(getattr(pipeline, "last_pair_count", 0)))
        finally:
            if gc_was_enabled:
                gc.enable()
    finally:
        torch.set_grad_enabled(True)
    return LatencyStats(
        end_to_end=_summary(totals),
        stages={s: _summary(v) for s, v in per_stage.items() if v},
        warmup=warmup,
        reps=reps,
        k_budget=k_budget,
        pair_counts=sorted(set(pairs)),
    )


def count_params(model: nn.Module, trainable_only: bool = True) -> dict[str, int]:
    """Scalar parameter count per owning layer plus ``"total"``."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        if trainable_only and not p.requires_grad:
            continue
        layer = name.rsplit(".", 1)[0] if "." in name else name
        counts[layer] = counts.get(layer, 0) + p.numel()
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# experiment drivers


@torch.no_grad()
def stage_one_cache(pipeline, records: Sequence[ImageRecord]) -> list:
    """Detector outputs per image; they are frozen, so sweeps reuse them."""
    return [pipeline.detector.detect_boxes(r, pipeline.mode) for r in records]


def evaluate_budget(pipeline, records, k_budget: int, ks: Iterable[int] = DEFAULT_KS, cache=None):
    ks = tuple(ks)
    graphs = [
        pipeline.forward(r, k_budget, stage_one=None if cache is None else cache[i], keep_top=max(ks))
        for i, r in enumerate(records)
    ]
    return report_from_results(
        list(zip(graphs, records)), [g.detections for g in graphs], ks, graph_constraint=pipeline.graph_constraint
    )


def dcs_sweep(
    pipeline,
    records: Sequence[ImageRecord],
    grid: Sequence[int],
    ks: Iterable[int] = DEFAULT_KS,
    epsilon: float = 1e-5,
    theta: int = 100,
    metric: str = "f1_avg",
) -> DcsCurve:
    """Sample the metric over proposal budgets (stage 1 computed once)."""
    ks = tuple(ks)
    cache = stage_one_cache(pipeline, records)

    def evaluator(k: int) -> float:
        report = evaluate_budget(pipeline, records, k, ks, cache)
        return float(getattr(report, metric))

    return sample_curve(evaluator, grid, epsilon, theta, metric)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
