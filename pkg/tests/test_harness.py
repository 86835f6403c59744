import time

import numpy as np
import pytest
import torch
from torch import nn

from sgglab.core import SceneGraph
from sgglab.detector import Detector
from sgglab.harness import LatencyStats, config_hash, count_params, dcs_sweep, measure_latency
from sgglab.relhead import AblationFlags, Pipeline, RelationHead
from sgglab.selection import dcs_fit, default_grid
from sgglab.synth import CATEGORIES, PREDICATES, SynthConfig, dense_record, generate_dataset


class StubPipeline:
    """Fixed-cost forward that never produces relations."""

    def __init__(self, delay=0.002):
        self.detector = Detector()
        self.mode = "perfect"
        self.graph_constraint = True
        self.delay = delay
        self.last_timings = {}
        self.last_pair_count = 0

    def forward(self, record, k_budget=100, stage_one=None, keep_top=None):
        end = time.perf_counter() + self.delay
        while time.perf_counter() < end:
            pass
        self.last_timings = {"detector": self.delay, "total": self.delay}
        dets = stage_one[0] if stage_one is not None else self.detector.detect_boxes(record)[0]
        return SceneGraph.build(record.image_id, dets, [])


@pytest.fixture(scope="module")
def records():
    return generate_dataset(SynthConfig(num_images=6, seed=2))


def test_single_rep_statistics(records):
    s = measure_latency(StubPipeline(), records, warmup=0, reps=1)
    e = s.end_to_end
    assert e["p50"] == e["mean"] == e["min"] == e["max"] == e["p95"]
    assert s.batch_size == 1


def test_stub_timing_is_stable(records):
    s = measure_latency(StubPipeline(0.005), records, warmup=2, reps=30)
    assert s.end_to_end["p95"] / s.end_to_end["p50"] < 1.5
    assert s.end_to_end["min"] <= s.end_to_end["mean"] <= s.end_to_end["max"]
    assert s.end_to_end["p50"] <= s.end_to_end["p95"]
    assert LatencyStats.from_json(s.to_json()) == s


def test_empty_image_list():
    with pytest.raises(ValueError):
        measure_latency(StubPipeline(), [])


def test_pair_counts_and_relation_time_grow_with_budget():
    torch.set_num_threads(1)
    head = RelationHead(CATEGORIES, len(PREDICATES))
    pipe = Pipeline(Detector(), head)
    image = dense_record(100, seed=0)
    small = measure_latency(pipe, [image], warmup=2, reps=5, k_budget=10)
    large = measure_latency(pipe, [image], warmup=2, reps=5, k_budget=100)
    assert small.pair_counts == [90] and large.pair_counts == [9900]
    assert large.stages["relation"]["mean"] > small.stages["relation"]["mean"]
    assert set(small.stages) == {"detector", "pooling", "relation", "ranking"}


def test_count_params():
    assert count_params(nn.Linear(256, 512))["total"] == 131_584
    assert count_params(nn.Linear(10, 10, bias=False))["total"] == 100
    head = RelationHead(CATEGORIES, len(PREDICATES), flags=AblationFlags.parse("TVSU"))
    counts = count_params(head)
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")
    assert counts["total"] == sum(p.numel() for p in head.parameters() if p.requires_grad)
    frozen = nn.Linear(4, 4)
    frozen.weight.requires_grad_(False)
    assert count_params(frozen)["total"] == 4
    assert count_params(frozen, trainable_only=False)["total"] == 20


def test_dcs_on_constant_metric_stub(records):
    curve = dcs_sweep(StubPipeline(0.0), records, default_grid(20, 5))
    assert set(curve.metric_values) == {0.0}
    assert dcs_fit(curve) == 1


def test_config_hash_is_order_free():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
