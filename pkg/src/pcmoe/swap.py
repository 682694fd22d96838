"""Two-tier expert storage with amortised, asynchronous swapping.

All expert parameters live in a :class:`ParameterWarehouse`. Committee
experts are copied into a :class:`ResidentStore`. When a committee update
asks for new experts, :func:`plan_swap` splits the pending experts into
``interval`` near-equal subsets and one subset is loaded per sample.

Loaded experts are staged and only become visible through
:meth:`SwapEngine.commit`, which replaces a whole slot at once. A reader
therefore sees either the complete old expert or the complete new one.

Time is virtual. IO and compute durations come from :class:`CostModelParams`.
In async mode a transfer overlaps compute, and a stall is charged only when
the loads are still running when the next update boundary arrives.
"""

from __future__ import annotations

import csv
import json
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .committee import CommitteeState
from .moe import ExpertParams, MoEModelSpec

SYNC = "sync"
ASYNC = "async"


@dataclass
class CostModelParams:
    compute_throughput: float  # flops per virtual ms
    io_bandwidth: float  # bytes per virtual ms
    base_latency: float  # virtual ms per sample
    mode: str = ASYNC

    def __post_init__(self):
        if min(self.compute_throughput, self.io_bandwidth, self.base_latency) <= 0:
            raise ValueError("cost model parameters must be positive")
        if self.mode not in (SYNC, ASYNC):
            raise ValueError(f"mode must be 'sync' or 'async', got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "compute_throughput": self.compute_throughput,
            "io_bandwidth": self.io_bandwidth,
            "base_latency": self.base_latency,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CostModelParams":
        return cls(float(doc["compute_throughput"]), float(doc["io_bandwidth"]),
                   float(doc["base_latency"]), doc.get("mode", ASYNC))


def load_cost(path) -> CostModelParams:
    return CostModelParams.from_dict(json.loads(Path(path).read_text()))


class ParameterWarehouse:
    """Secondary tier holding every expert. Never mutated after construction."""

    def __init__(self, model: MoEModelSpec):
        self._experts = [[e.copy() for e in layer.experts] for layer in model.layers]
        for layer in self._experts:
            for e in layer:
                for a in (e.w1, e.b1, e.w2, e.b2):
                    a.flags.writeable = False

    def num_layers(self) -> int:
        return len(self._experts)

    def expert_bytes(self, layer: int, index: int) -> int:
        return self._experts[layer][index].nbytes

    def peek(self, layer: int, index: int) -> ExpertParams:
        return self._experts[layer][index]

    def fetch(self, layer: int, index: int) -> ExpertParams:
        """Copy an expert out of the warehouse (the actual 'transfer')."""
        return self._experts[layer][index].copy()


@dataclass
class Slot:
    expert: int
    params: ExpertParams
    version: int = 0


class ResidentStore:
    """Main-memory tier: a fixed number of slots per layer."""

    def __init__(self, warehouse: ParameterWarehouse, resident: Sequence[Sequence[int]],
                 overhead_bytes: int = 0):
        self.warehouse = warehouse
        self.overhead_bytes = overhead_bytes
        self._lock = threading.Lock()
        self.slots = [[Slot(i, warehouse.fetch(l, i)) for i in layer] for l, layer in enumerate(resident)]

    def resident(self, layer: int) -> list[int]:
        return [s.expert for s in self.slots[layer]]

    def view(self, layer: int) -> dict[int, ExpertParams]:
        """Consistent snapshot of a layer: expert index -> parameters."""
        with self._lock:
            return {s.expert: s.params for s in self.slots[layer]}

    def install(self, layer: int, evict: int, expert: int, params: ExpertParams) -> None:
        with self._lock:
            for pos, s in enumerate(self.slots[layer]):
                if s.expert == evict:
                    self.slots[layer][pos] = Slot(expert, params, s.version + 1)
                    return
        raise KeyError(f"layer {layer}: expert {evict} is not resident")

    @property
    def resident_bytes(self) -> int:
        return self.overhead_bytes + sum(s.params.nbytes for layer in self.slots for s in layer)


@dataclass
class SwapPlan:
    """Pending loads of one layer, split into per-sample subsets."""

    subsets: list[list[int]]
    evictions: dict[int, int]  # incoming expert -> resident expert it replaces
    cursor: int = 0
    staged: dict[int, ExpertParams] = field(default_factory=dict)

    @property
    def pending(self) -> list[int]:
        return [i for s in self.subsets for i in s]

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.subsets)

    @classmethod
    def empty(cls) -> "SwapPlan":
        return cls([], {})


def split_even(items: Sequence[int], parts: int) -> list[list[int]]:
    """Split into ``parts`` contiguous chunks whose sizes differ by at most one,
    earlier chunks taking the extra elements."""
    base, extra = divmod(len(items), parts)
    out, start = [], 0
    for p in range(parts):
        size = base + (1 if p < extra else 0)
        out.append(list(items[start:start + size]))
        start += size
    return out


def plan_swap(resident: Sequence[int], target: Sequence[int], interval: int,
              scores: Optional[Sequence[float]] = None) -> SwapPlan:
    """Plan the loads turning ``resident`` into ``target``.

    ``target`` is expected in descending importance; the pending experts keep
    that order. Each incoming expert evicts one outgoing resident, lowest
    score first (lowest index on ties, or slot order reversed when no scores
    are given).
    """
    if len(resident) != len(target):
        raise ValueError(f"resident has {len(resident)} experts but target has {len(target)}")
    if interval < 1:
        raise ValueError("interval must be positive")
    res, tgt = set(resident), set(target)
    pending = [i for i in target if i not in res]
    if not pending:
        return SwapPlan.empty()
    outgoing = [i for i in resident if i not in tgt]
    if scores is not None:
        outgoing.sort(key=lambda i: (scores[i], i))
    else:
        outgoing.reverse()
    return SwapPlan(split_even(pending, interval), dict(zip(pending, outgoing)))


@dataclass
class SampleMetrics:
    sample_id: int
    compute_ms: float
    stall_ms: float
    io_bytes: int
    resident_bytes: int
    base_ms: float = 0.0

    @property
    def latency_ms(self) -> float:
        return self.base_ms + self.compute_ms + self.stall_ms


@dataclass
class RunMetrics:
    samples: list[SampleMetrics] = field(default_factory=list)
    peak_resident_bytes: int = 0

    def record(self, m: SampleMetrics) -> None:
        self.samples.append(m)
        self.peak_resident_bytes = max(self.peak_resident_bytes, m.resident_bytes)

    @property
    def mean_latency(self) -> float:
        return float(np.mean([m.latency_ms for m in self.samples])) if self.samples else 0.0

    @property
    def total_io_bytes(self) -> int:
        return sum(m.io_bytes for m in self.samples)

    @property
    def mean_io_bytes(self) -> float:
        return self.total_io_bytes / len(self.samples) if self.samples else 0.0

    @property
    def mean_compute_ms(self) -> float:
        return float(np.mean([m.compute_ms for m in self.samples])) if self.samples else 0.0

    @property
    def total_compute_ms(self) -> float:
        return float(sum(m.compute_ms for m in self.samples))

    @property
    def io_rates(self) -> list[float]:
        return [m.io_bytes / m.latency_ms for m in self.samples if m.latency_ms > 0]

    @property
    def mean_io_rate(self) -> float:
        rates = self.io_rates
        return float(np.mean(rates)) if rates else 0.0

    @property
    def peak_io_rate(self) -> float:
        rates = self.io_rates
        return float(max(rates)) if rates else 0.0

    def aggregates(self) -> dict:
        return {
            "peak_resident_bytes": self.peak_resident_bytes,
            "mean_latency_ms": self.mean_latency,
            "mean_compute_ms": self.mean_compute_ms,
            "mean_stall_ms": float(np.mean([m.stall_ms for m in self.samples])) if self.samples else 0.0,
            "total_io_bytes": self.total_io_bytes,
            "mean_io_bytes": self.mean_io_bytes,
            "mean_io_rate": self.mean_io_rate,
            "peak_io_rate": self.peak_io_rate,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "compute_ms", "stall_ms", "io_bytes", "resident_bytes"])
            for m in self.samples:
                w.writerow([m.sample_id, repr(m.compute_ms), repr(m.stall_ms), m.io_bytes, m.resident_bytes])


def advance(warehouse: ParameterWarehouse, layer: int, plan: SwapPlan) -> int:
    """Load the plan's cursor subset into its staging area; returns bytes moved.

    Advancing a finished plan is a no-op.
    """
    if plan.done:
        return 0
    moved = 0
    for i in plan.subsets[plan.cursor]:
        plan.staged[i] = warehouse.fetch(layer, i)
        moved += warehouse.expert_bytes(layer, i)
    plan.cursor += 1
    return moved


def commit_completed(store: ResidentStore, state: CommitteeState, layer: int, plan: SwapPlan) -> CommitteeState:
    """Install every fully staged expert of ``plan`` into its slot."""
    lc = state.layers[layer]
    for i, params in list(plan.staged.items()):
        store.install(layer, plan.evictions[i], i, params)
        del plan.staged[i]
        if i in lc.pending:
            lc.pending.remove(i)
        lc.version += 1
    lc.resident = store.resident(layer)
    return state


class SwapEngine:
    """Per-model swap bookkeeping and the virtual IO clock."""

    def __init__(self, model: MoEModelSpec, resident: Sequence[Sequence[int]], cost: CostModelParams):
        self.model = model
        self.cost = cost
        self.warehouse = ParameterWarehouse(model)
        self.store = ResidentStore(self.warehouse, resident, model.overhead_bytes)
        self.plans = [SwapPlan.empty() for _ in model.layers]
        self.discarded_loads = 0
        self._backlog_ms = 0.0

    def submit(self, layer: int, target: Sequence[int], interval: int,
               scores: Optional[Sequence[float]] = None) -> SwapPlan:
        """Replace the layer's plan; unloaded subsets of the old plan are dropped."""
        old = self.plans[layer]
        if not old.done:
            self.discarded_loads += sum(len(s) for s in old.subsets[old.cursor:])
        plan = plan_swap(self.store.resident(layer), target, interval, scores)
        self.plans[layer] = plan
        return plan

    def load_step(self) -> int:
        return sum(advance(self.warehouse, l, p) for l, p in enumerate(self.plans))

    def charge(self, sample_id: int, io_bytes: int, compute_ops: float, next_is_boundary: bool) -> SampleMetrics:
        io_ms = io_bytes / self.cost.io_bandwidth
        compute_ms = compute_ops / self.cost.compute_throughput
        if self.cost.mode == SYNC:
            stall = io_ms
        else:
            self._backlog_ms = max(0.0, self._backlog_ms + io_ms - compute_ms)
            stall = 0.0
            if next_is_boundary:
                stall, self._backlog_ms = self._backlog_ms, 0.0
        return SampleMetrics(sample_id, compute_ms, stall, io_bytes,
                             self.store.resident_bytes, self.cost.base_latency)

    def commit(self, state: CommitteeState) -> CommitteeState:
        for l, plan in enumerate(self.plans):
            commit_completed(self.store, state, l, plan)
        return state


class ThreadedLoader:
    """Real concurrent loader: copies run on a worker thread while the caller
    keeps computing.

    Commits still happen only where the caller invokes :meth:`commit`, so
    for the same commit schedule the outputs match the virtual-time engine.
    """

    def __init__(self, engine: SwapEngine):
        self.engine = engine
        self._pool = ThreadPoolExecutor(max_workers=1)
        self._inflight: dict[int, Future] = {}

    def start(self, layer: int) -> None:
        """Begin loading the layer's next subset (at most one per step)."""
        plan = self.engine.plans[layer]
        if layer not in self._inflight and not plan.done:
            self._inflight[layer] = self._pool.submit(advance, self.engine.warehouse, layer, plan)

    def load_step(self) -> None:
        for layer in range(len(self.engine.plans)):
            self.start(layer)

    def wait(self) -> int:
        moved = sum(f.result() for f in self._inflight.values())
        self._inflight.clear()
        return moved

    def commit(self, state: CommitteeState) -> CommitteeState:
        self.wait()
        return self.engine.commit(state)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
