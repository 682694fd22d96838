"""Trace replay under a serving policy, with virtual-time cost accounting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .committee import (
    CommitteeState, PCConfig, Strategy, _exchange_forward, _layer_forward_pc,
    load_config, select_committee,
)
from .moe import (
    MoEModelSpec, Sample, expert_forward, expert_magnitudes, gate_forward,
    model_forward_reference, pool_logits, route_topk,
)
from .swap import CostModelParams, RunMetrics, SampleMetrics, SwapEngine, ThreadedLoader
from .workload import Trace

REFERENCE = "reference"
PC = "pc"
RANDOM_KEEP = "random-keep"
MAGNITUDE_KEEP = "magnitude-keep"
ON_DEMAND = "on-demand"

REPORT_COLUMNS = ["policy", "expert_ratio", "accuracy", "fidelity", "peak_memory", "mean_latency", "mean_io"]


@dataclass
class ServePolicy:
    kind: str
    ratio: float = 1.0
    seed: int = 0
    config: Optional[PCConfig] = None

    def __post_init__(self):
        if self.kind not in (REFERENCE, PC, RANDOM_KEEP, MAGNITUDE_KEEP, ON_DEMAND):
            raise ValueError(f"unknown policy {self.kind!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.kind == PC and self.config is None:
            raise ValueError("pc policy needs a config")

    @classmethod
    def parse(cls, text: str) -> "ServePolicy":
        kind, _, rest = text.partition(":")
        if kind == REFERENCE:
            return cls(REFERENCE)
        if kind == PC:
            return cls(PC, config=load_config(rest))
        if kind == RANDOM_KEEP:
            ratio, _, seed = rest.partition(":")
            return cls(RANDOM_KEEP, float(ratio), int(seed or 0))
        if kind in (MAGNITUDE_KEEP, ON_DEMAND):
            return cls(kind, float(rest))
        raise ValueError(f"cannot parse policy {text!r}")

    def describe(self) -> dict:
        doc = {"kind": self.kind, "ratio": self.ratio}
        if self.kind == RANDOM_KEEP:
            doc["seed"] = self.seed
        if self.config is not None:
            doc["config"] = self.config.to_dict()
        return doc


@dataclass
class ServeReport:
    policy: ServePolicy
    expert_ratio: float
    accuracy: float
    fidelity: float
    metrics: RunMetrics
    final_resident: list[list[int]]
    logits: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.describe(),
            "expert_ratio": self.expert_ratio,
            "accuracy": self.accuracy,
            "fidelity": self.fidelity,
            "aggregates": self.metrics.aggregates(),
            "final_resident": self.final_resident,
        }

    def row(self) -> dict:
        agg = self.metrics.aggregates()
        return {
            "policy": self.policy.kind,
            "expert_ratio": self.expert_ratio,
            "accuracy": self.accuracy,
            "fidelity": self.fidelity,
            "peak_memory": agg["peak_resident_bytes"],
            "mean_latency": agg["mean_latency_ms"],
            "mean_io": agg["mean_io_bytes"],
        }


def keep_count(ratio: float, n: int) -> int:
    return max(1, min(n, int(math.floor(ratio * n + 0.5))))


def expert_flops(d: int, h: int) -> int:
    return 4 * d * h + 2 * h + d


def _gate_flops(model: MoEModelSpec, layer, tokens: int) -> int:
    return tokens * 2 * layer.n * model.d


def _head_flops(model: MoEModelSpec) -> int:
    return 2 * model.num_classes * model.d


def relative_error(logits: np.ndarray, ref: np.ndarray) -> float:
    denom = float(np.linalg.norm(ref))
    return float(np.linalg.norm(logits - ref)) / (denom if denom > 0 else 1.0)


def serve_trace(model: MoEModelSpec, trace: Trace, policy: ServePolicy,
                cost: CostModelParams, threaded_loader: bool = False) -> ServeReport:
    """Replay ``trace`` under ``policy``.

    Accuracy is measured against sample labels (or the reference argmax for
    unlabelled samples); fidelity is the mean relative L2 distance between
    served and reference logits. ``threaded_loader`` makes the committee
    policy copy experts on a worker thread instead of inline.
    """
    if not trace.samples:
        raise ValueError("empty trace")
    mags = expert_magnitudes(model)
    if policy.kind == PC:
        logits, metrics, resident = _run_pc(model, trace, policy, cost, mags, threaded_loader)
    else:
        runner = {
            REFERENCE: _run_reference,
            RANDOM_KEEP: _run_keep,
            MAGNITUDE_KEEP: _run_keep,
            ON_DEMAND: _run_on_demand,
        }[policy.kind]
        logits, metrics, resident = runner(model, trace, policy, cost, mags)

    correct, errs = 0, []
    for s, out in zip(trace.samples, logits):
        ref, _ = model_forward_reference(model, s)
        label = s.label if s.label is not None else int(np.argmax(ref))
        correct += int(np.argmax(out)) == label
        errs.append(relative_error(out, ref))

    total = sum(model.experts_per_layer)
    ratio = sum(len(r) for r in resident) / total
    return ServeReport(policy, ratio, correct / len(logits), float(np.mean(errs)),
                       metrics, resident, logits)


def _run_reference(model, trace, policy, cost, mags):
    metrics = RunMetrics()
    flops_per_eval = expert_flops(model.d, model.h)
    logits = []
    for t, s in enumerate(trace.samples):
        out, record = model_forward_reference(model, s)
        ops = _head_flops(model)
        for layer, routes in zip(model.layers, record):
            ops += _gate_flops(model, layer, len(s.tokens)) + flops_per_eval * sum(len(r) for r in routes)
        metrics.record(SampleMetrics(t, ops / cost.compute_throughput, 0.0, 0,
                                     model.total_bytes, cost.base_latency))
        logits.append(out)
    return logits, metrics, [list(range(layer.n)) for layer in model.layers]


def _run_pc(model, trace, policy, cost, mags, threaded=False):
    config = policy.config
    config.validate(model.experts_per_layer)
    state = CommitteeState.cold_start(mags, config)
    engine = SwapEngine(model, [lc.resident for lc in state.layers], cost)
    loader = ThreadedLoader(engine) if threaded else None
    metrics = RunMetrics()
    flops_per_eval = expert_flops(model.d, model.h)
    logits = []
    try:
        for t, s in enumerate(trace.samples):
            state.sample_counter = t
            boundary = t % config.interval == 0
            if loader is not None and not boundary:
                loader.load_step()
            tokens = s.tokens
            ops = _head_flops(model)
            for l, layer in enumerate(model.layers):
                params = engine.store.view(l)
                out, evals, request = _layer_forward_pc(layer, tokens, state, config, mags[l], l, params)
                ops += _gate_flops(model, layer, len(tokens)) + flops_per_eval * evals
                if config.strategies[l] is Strategy.SKIP:
                    # identity pass-through of skipped requests
                    ops += 2 * model.d * (len(tokens) * layer.k - evals)
                if request is not None:
                    scores = state.layers[l].last_scores
                    engine.submit(l, select_committee(scores, config.num_experts[l]), config.interval, scores)
                    if loader is not None:
                        loader.start(l)
                tokens = out
            logits.append(pool_logits(model.head, tokens))
            io = engine.load_step() if loader is None else loader.wait()
            metrics.record(engine.charge(t, io, ops, (t + 1) % config.interval == 0))
            engine.commit(state)
    finally:
        if loader is not None:
            loader.close()
    return logits, metrics, [list(lc.resident) for lc in state.layers]


def _fixed_resident(model, policy, mags):
    out = []
    rng = np.random.default_rng(policy.seed)
    for layer, m in zip(model.layers, mags):
        c = keep_count(policy.ratio, layer.n)
        if policy.kind == RANDOM_KEEP:
            out.append(sorted(int(i) for i in rng.choice(layer.n, size=c, replace=False)))
        else:
            out.append(select_committee(np.asarray(m), c))
    return out


def _run_keep(model, trace, policy, cost, mags):
    resident = _fixed_resident(model, policy, mags)
    resident_bytes = model.overhead_bytes + model.expert_bytes * sum(len(r) for r in resident)
    metrics = RunMetrics()
    flops_per_eval = expert_flops(model.d, model.h)
    logits = []
    for t, s in enumerate(trace.samples):
        tokens = s.tokens
        ops = _head_flops(model)
        for layer, res in zip(model.layers, resident):
            tokens, evals = _exchange_forward(layer, tokens, res, layer.k)
            ops += _gate_flops(model, layer, len(tokens)) + flops_per_eval * evals
        logits.append(pool_logits(model.head, tokens))
        metrics.record(SampleMetrics(t, ops / cost.compute_throughput, 0.0, 0,
                                     resident_bytes, cost.base_latency))
    return logits, metrics, resident


def _run_on_demand(model, trace, policy, cost, mags):
    """Keep a magnitude-ranked subset resident; fetch any other requested
    expert synchronously for the current layer and drop it afterwards."""
    resident = _fixed_resident(model, ServePolicy(MAGNITUDE_KEEP, policy.ratio), mags)
    base_bytes = model.overhead_bytes + model.expert_bytes * sum(len(r) for r in resident)
    metrics = RunMetrics()
    flops_per_eval = expert_flops(model.d, model.h)
    logits = []
    for t, s in enumerate(trace.samples):
        tokens = s.tokens
        ops, io, transient = _head_flops(model), 0, 0
        for layer, res in zip(model.layers, resident):
            res = set(res)
            fetched: set[int] = set()
            out = []
            for x in tokens:
                y = np.zeros_like(x)
                for i, w in route_topk(gate_forward(layer.gate, x), layer.k):
                    if i not in res:
                        fetched.add(i)
                    y = y + w * expert_forward(layer.experts[i], x)
                out.append(y)
            evals = len(tokens) * layer.k
            ops += _gate_flops(model, layer, len(tokens)) + flops_per_eval * evals
            io += len(fetched) * model.expert_bytes
            transient = max(transient, len(fetched) * model.expert_bytes)
            tokens = out
        logits.append(pool_logits(model.head, tokens))
        metrics.record(SampleMetrics(t, ops / cost.compute_throughput, io / cost.io_bandwidth, io,
                                     base_bytes + transient, cost.base_latency))
    return logits, metrics, resident


def save_report(report: ServeReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def row_from_report_doc(doc: dict) -> dict:
    agg = doc["aggregates"]
    return {
        "policy": doc["policy"]["kind"],
        "expert_ratio": doc["expert_ratio"],
        "accuracy": doc["accuracy"],
        "fidelity": doc["fidelity"],
        "peak_memory": agg["peak_resident_bytes"],
        "mean_latency": agg["mean_latency_ms"],
        "mean_io": agg["mean_io_bytes"],
    }


def report(reports: Sequence, out_path) -> list[dict]:
    """Write a tradeoff table sorted by (policy, expert_ratio).

    Accepts :class:`ServeReport` objects or their JSON dicts. The output
    format follows the suffix: ``.json`` writes a list of rows, anything
    else CSV.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    rows = [r.row() if isinstance(r, ServeReport) else row_from_report_doc(r) for r in reports]
    rows.sort(key=lambda r: (r["policy"], r["expert_ratio"]))
    out_path = Path(out_path)
    if out_path.suffix == ".json":
        out_path.write_text(json.dumps(rows, indent=2))
    else:
        with open(out_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def read_tradeoff_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        out.append({
            "policy": r["policy"],
            "expert_ratio": float(r["expert_ratio"]),
            "accuracy": float(r["accuracy"]),
            "fidelity": float(r["fidelity"]),
            "peak_memory": int(r["peak_memory"]),
            "mean_latency": float(r["mean_latency"]),
            "mean_io": float(r["mean_io"]),
        })
    return out
