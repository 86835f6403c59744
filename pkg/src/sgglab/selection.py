"""Candidate selection between the two stages: top-k budgets, pair enumeration, DCS."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import FORMAT, Detection

DEFAULT_EPSILON = 1e-5
DEFAULT_THETA = 100


def topk_proposals(detections: Sequence[Detection], k: int) -> list[Detection]:
    """The ``k`` highest-scoring detections; equal scores keep their input order."""
    if k < 1:
        raise ValueError(f"proposal budget must be >= 1, got {k}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    return [detections[i] for i in order[:k]]


def enumerate_pairs(n: int) -> list[tuple[int, int]]:
    """All ordered (subject, object) index pairs without self-pairs, lexicographic."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def pair_index_arrays(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``enumerate_pairs``: subject and object index arrays."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = i != j
    return i[keep], j[keep]


def default_grid(theta: int = DEFAULT_THETA, step: int = 5) -> list[int]:
    """``[1, step, 2*step, ..., theta]``; k=0 would give an empty graph."""
    grid = [1] + list(range(step, theta + 1, step))
    if grid[-1] != theta:
        grid.append(theta)
    return sorted(set(grid))


@dataclass
class DcsCurve:
    sampled_k: list[int]
    metric_values: list[float]
    epsilon: float = DEFAULT_EPSILON
    theta: int = DEFAULT_THETA
    x_opt: int | None = None
    smoothing: int = 1
    metric: str = "f1_avg"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = list(self.sampled_k)
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("sampled_k must be strictly increasing")
        if ks and ks[0] < 1:
            raise ValueError("smallest budget is 1")

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "sampled_k": list(self.sampled_k),
            "metric_values": list(self.metric_values),
            "epsilon": self.epsilon,
            "theta": self.theta,
            "x_opt": self.x_opt,
            "smoothing": self.smoothing,
            "metric": self.metric,
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DcsCurve":
        d = {k: v for k, v in d.items() if k not in ("format", "config_hash")}
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "DcsCurve":
        return cls.from_json(json.loads(Path(path).read_text()))


def sample_curve(
    evaluator: Callable[[int], float],
    ks: Sequence[int],
    epsilon: float = DEFAULT_EPSILON,
    theta: int = DEFAULT_THETA,
    metric: str = "f1_avg",
) -> DcsCurve:
    """Evaluate the metric once per budget in ``ks``."""
    values = []
    for k in ks:
        try:
            values.append(float(evaluator(k)))
        except Exception as exc:
            raise RuntimeError(f"evaluator failed at k={k}: {exc}") from exc
    return DcsCurve(list(ks), values, epsilon, theta, metric=metric)


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return values
    half = window // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        lo, hi = max(0, i - half), min(len(values), i + half + 1)
        out[i] = values[lo:hi].mean()
    return out


def slope(ks: Sequence[int], values: Sequence[float]) -> np.ndarray:
    """Central differences on the grid, one-sided at both ends."""
    x = np.asarray(ks, dtype=np.float64)
    f = np.asarray(values, dtype=np.float64)
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - f[:-2]) / (x[2:] - x[:-2])
    d[0] = (f[1] - f[0]) / (x[1] - x[0])
    d[-1] = (f[-1] - f[-2]) / (x[-1] - x[-2])
    return d


def dcs_fit(curve: DcsCurve) -> int:
    """Smallest sampled budget whose slope magnitude is below epsilon, else theta.

    The result is also stored on ``curve.x_opt``.
    """
    if len(curve.sampled_k) < 3:
        raise ValueError("DCS needs at least 3 grid points")
    values = _smooth(np.asarray(curve.metric_values, dtype=np.float64), curve.smoothing)
    d = slope(curve.sampled_k, values)
    flat = np.flatnonzero(np.abs(d) < curve.epsilon)
    curve.x_opt = int(curve.sampled_k[flat[0]]) if flat.size else int(curve.theta)
    return curve.x_opt


def with_epsilon(curve: DcsCurve, epsilon: float) -> DcsCurve:
    return replace(curve, epsilon=epsilon, x_opt=None)
