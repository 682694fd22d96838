"""Synthetic models and input streams with controllable temporal locality.

Gate rows of the first layer point along fixed expert directions. Cluster
``c`` owns the expert subset ``S_c`` (``k`` consecutive experts, wrapping
around) and its center is the normalised sum of those directions, so tokens
near the center route to ``S_c``. A trace dwells on one cluster for
``drift_period`` samples before moving to the next.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .moe import (
    ExpertParams, GateParams, MoELayerSpec, MoEModelSpec, Sample,
    gate_forward, model_forward_reference, route_topk,
)

GATE_GAIN = 4.0
CENTER_RADIUS = 2.0


@dataclass
class TraceSpec:
    num_samples: int
    tokens_per_sample: int
    num_clusters: int
    drift_period: int
    noise_sigma: float = 0.3
    order: str = "sequential"  # sequential | speedup:<factor> | shuffled
    seed: int = 0

    def __post_init__(self):
        if self.drift_period < 1:
            raise ValueError(f"drift_period must be >= 1, got {self.drift_period}")
        if min(self.num_samples, self.tokens_per_sample, self.num_clusters) < 1:
            raise ValueError("num_samples, tokens_per_sample and num_clusters must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        kind, factor = parse_order(self.order)
        if kind == "speedup" and factor < 1:
            raise ValueError("speedup factor must be >= 1")

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "tokens_per_sample": self.tokens_per_sample,
            "num_clusters": self.num_clusters,
            "drift_period": self.drift_period,
            "noise_sigma": self.noise_sigma,
            "order": self.order,
            "seed": self.seed,
        }


def parse_order(order: str) -> tuple[str, float]:
    if order in ("sequential", "shuffled"):
        return order, 1.0
    if order.startswith("speedup:"):
        return "speedup", float(order.split(":", 1)[1])
    raise ValueError(f"unknown order {order!r}")


@dataclass
class Trace:
    samples: list[Sample]
    spec: Optional[TraceSpec] = None
    clusters: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def labeled(self) -> bool:
        return all(s.label is not None for s in self.samples)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict() if self.spec else None,
            "samples": [
                {"tokens": [t.tolist() for t in s.tokens], "label": s.label}
                for s in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Trace":
        spec = TraceSpec(**doc["spec"]) if doc.get("spec") else None
        samples = [Sample(s["tokens"], s.get("label")) for s in doc["samples"]]
        return cls(samples, spec)


def save_trace(trace: Trace, path) -> None:
    Path(path).write_text(json.dumps(trace.to_dict()))


def load_trace(path) -> Trace:
    return Trace.from_dict(json.loads(Path(path).read_text()))


def _unit_directions(rng, count, d):
    if count <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, count)))
        return q.T.copy()
    v = rng.standard_normal((count, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_model(d: int, h: int, L: int, n: int, k: int, num_classes: int, seed: int) -> MoEModelSpec:
    if not 1 <= k <= n:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(L):
        wg = GATE_GAIN * _unit_directions(rng, n, d)
        experts = []
        for _ in range(n):
            # per-expert scale spreads the parameter magnitudes
            scale = rng.uniform(0.5, 1.5)
            experts.append(ExpertParams(
                scale * rng.standard_normal((h, d)) / np.sqrt(d),
                0.1 * rng.standard_normal(h),
                scale * rng.standard_normal((d, h)) / np.sqrt(d),
                0.1 * rng.standard_normal(d),
            ))
        layers.append(MoELayerSpec(GateParams(wg), experts, k))
    head = rng.standard_normal((num_classes, d)) / np.sqrt(d)
    return MoEModelSpec(d, h, layers, head, model_id=f"synthetic-L{L}-n{n}-k{k}-s{seed}", seed=seed)


def cluster_experts(model: MoEModelSpec, c: int) -> list[int]:
    """Designated first-layer experts of cluster ``c``."""
    layer = model.layers[0]
    return [(c * layer.k + j) % layer.n for j in range(layer.k)]


def cluster_centers(num_clusters: int, d: int, model: Optional[MoEModelSpec] = None,
                    seed: int = 0) -> np.ndarray:
    if model is None:
        return CENTER_RADIUS * _unit_directions(np.random.default_rng(seed), num_clusters, d)
    wg = model.layers[0].gate.wg
    dirs = wg / np.linalg.norm(wg, axis=1, keepdims=True)
    centers = []
    for c in range(num_clusters):
        v = dirs[cluster_experts(model, c)].sum(axis=0)
        centers.append(CENTER_RADIUS * v / np.linalg.norm(v))
    return np.array(centers)


def _cluster_schedule(spec: TraceSpec) -> list[int]:
    kind, factor = parse_order(spec.order)
    period = spec.drift_period
    if kind == "speedup":
        period = max(1, int(spec.drift_period // factor))
    return [(t // period) % spec.num_clusters for t in range(spec.num_samples)]


def gen_trace(spec: TraceSpec, model: Optional[MoEModelSpec] = None, d: Optional[int] = None) -> Trace:
    """Generate a stream of samples; labels come from the reference model."""
    if model is None and d is None:
        raise ValueError("need a model or an explicit token dimension d")
    dim = model.d if model is not None else d
    rng = np.random.default_rng(spec.seed)
    centers = cluster_centers(spec.num_clusters, dim, model, seed=spec.seed)
    clusters = _cluster_schedule(spec)
    samples = []
    for c in clusters:
        tokens = centers[c] + spec.noise_sigma * rng.standard_normal((spec.tokens_per_sample, dim))
        samples.append(Sample(list(tokens)))
    if parse_order(spec.order)[0] == "shuffled":
        perm = rng.permutation(len(samples))
        samples = [samples[i] for i in perm]
        clusters = [clusters[i] for i in perm]
    if model is not None:
        for s in samples:
            logits, _ = model_forward_reference(model, s)
            s.label = int(np.argmax(logits))
    return Trace(samples, spec, clusters)


def activated_sets(model: MoEModelSpec, sample: Sample) -> list[set[int]]:
    _, record = model_forward_reference(model, sample)
    return [{i for routes in layer for i, _ in routes} for layer in record]


def jaccard(a: set, b: set) -> float:
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def locality_index(trace: Trace, model: MoEModelSpec, k: Optional[int] = None) -> float:
    """Mean Jaccard similarity of consecutive samples' activated expert sets,
    averaged over layers. ``k`` overrides every layer's routing width."""
    if len(trace) < 2:
        raise ValueError("locality needs at least two samples")
    if k is not None:
        model = MoEModelSpec(
            model.d, model.h,
            [MoELayerSpec(layer.gate, layer.experts, min(k, layer.n)) for layer in model.layers],
            model.head, model.model_id, model.seed,
        )
    sets = [activated_sets(model, s) for s in trace.samples]
    sims = [
        np.mean([jaccard(a, b) for a, b in zip(prev, cur)])
        for prev, cur in zip(sets, sets[1:])
    ]
    return float(np.mean(sims))


def top1_expert(model: MoEModelSpec, x: np.ndarray) -> int:
    layer = model.layers[0]
    return route_topk(gate_forward(layer.gate, x), 1)[0][0]


def profiling_trace(trace: Trace, fraction: float = 0.1, min_length: int = 640) -> Trace:
    """Take the leading ``fraction`` of a trace and tile it end-to-start until
    it is at least ``min_length`` samples long."""
    head = trace.samples[: max(1, int(round(len(trace) * fraction)))]
    reps = -(-min_length // len(head))
    samples = [Sample(list(s.tokens), s.label) for _ in range(reps) for s in head]
    return Trace(samples, trace.spec)
