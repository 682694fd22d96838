"""Offline committee planner.

Profiles random committee configurations on a labelled trace, fits one
linear model per metric (accuracy, peak memory, mean latency), then runs a
genetic search for the config with the best predicted accuracy that stays
inside the memory and latency limits.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .committee import PCConfig, Strategy
from .moe import MoEModelSpec
from .serving import PC, ServePolicy, serve_trace
from .swap import CostModelParams
from .workload import Trace

log = logging.getLogger(__name__)

INTERVAL_DOMAIN = (1, 2, 4, 8, 16, 32)
RIDGE_PENALTY = 1e-8
METRICS = ("accuracy", "memory", "latency")


@dataclass
class Constraints:
    limit_memory: float  # bytes
    limit_latency: float  # virtual ms

    def __post_init__(self):
        if self.limit_memory <= 0 or self.limit_latency <= 0:
            raise ValueError("constraints must be positive")

    def to_dict(self) -> dict:
        return {"limit_memory_bytes": self.limit_memory, "limit_latency_ms": self.limit_latency}

    @classmethod
    def from_dict(cls, doc: dict) -> "Constraints":
        return cls(float(doc["limit_memory_bytes"]), float(doc["limit_latency_ms"]))


@dataclass
class ModelShape:
    experts_per_layer: list[int]
    intervals: tuple[int, ...] = INTERVAL_DOMAIN

    @property
    def num_layers(self) -> int:
        return len(self.experts_per_layer)

    @classmethod
    def of(cls, model: MoEModelSpec, intervals: Sequence[int] = INTERVAL_DOMAIN) -> "ModelShape":
        return cls(model.experts_per_layer, tuple(intervals))

    def to_dict(self) -> dict:
        return {"experts_per_layer": self.experts_per_layer, "intervals": list(self.intervals)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelShape":
        return cls(list(doc["experts_per_layer"]), tuple(doc.get("intervals", INTERVAL_DOMAIN)))


@dataclass
class ProfileRecord:
    config: PCConfig
    accuracy: float
    peak_memory: int
    mean_latency: float
    fidelity: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "accuracy": self.accuracy,
            "peak_memory": self.peak_memory,
            "mean_latency": self.mean_latency,
            "fidelity": self.fidelity,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProfileRecord":
        return cls(PCConfig.from_dict(doc["config"]), float(doc["accuracy"]), int(doc["peak_memory"]),
                   float(doc["mean_latency"]), float(doc.get("fidelity", 0.0)))

    def target(self, metric: str) -> float:
        return {"accuracy": self.accuracy, "memory": float(self.peak_memory),
                "latency": self.mean_latency}[metric]


@dataclass
class PerfModel:
    accuracy: np.ndarray
    memory: np.ndarray
    latency: np.ndarray

    @property
    def feature_dim(self) -> int:
        return len(self.accuracy)

    def weights(self) -> np.ndarray:
        return np.stack([self.accuracy, self.memory, self.latency])

    def to_dict(self) -> dict:
        return {m: getattr(self, m).tolist() for m in METRICS}

    @classmethod
    def from_dict(cls, doc: dict) -> "PerfModel":
        return cls(*(np.asarray(doc[m], dtype=np.float64) for m in METRICS))


@dataclass
class GaParams:
    population: int = 50
    mutation_rate: float = 0.5
    crossover_rate: float = 0.01
    generations: int = 5000
    seed: int = 0


def featurize(config: PCConfig) -> np.ndarray:
    """``[1, num_experts..., exchange indicators..., 1/interval]``."""
    return np.concatenate([
        [1.0],
        np.asarray(config.num_experts, dtype=np.float64),
        [1.0 if s is Strategy.EXCHANGE else 0.0 for s in config.strategies],
        [1.0 / config.interval],
    ])


def random_configs(shape: ModelShape, count: int = 64, seed: int = 0) -> list[PCConfig]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        out.append(PCConfig(
            int(rng.choice(shape.intervals)),
            [int(rng.integers(1, n + 1)) for n in shape.experts_per_layer],
            [Strategy.EXCHANGE if rng.random() < 0.5 else Strategy.SKIP for _ in shape.experts_per_layer],
        ))
    return out


def all_configs(shape: ModelShape):
    for interval in shape.intervals:
        for counts in itertools.product(*(range(1, n + 1) for n in shape.experts_per_layer)):
            for strats in itertools.product(list(Strategy), repeat=shape.num_layers):
                yield PCConfig(interval, list(counts), list(strats))


def run_profile(model: MoEModelSpec, trace: Trace, configs: Sequence[PCConfig],
                cost: CostModelParams, workers: int = 1) -> list[ProfileRecord]:
    """Replay the whole trace once per config and record its metrics."""
    if not trace.samples:
        raise ValueError("empty profiling trace")

    def one(config: PCConfig) -> ProfileRecord:
        r = serve_trace(model, trace, ServePolicy(PC, config=config), cost)
        return ProfileRecord(config, r.accuracy, r.metrics.peak_resident_bytes,
                             r.metrics.mean_latency, r.fidelity)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, configs))
    return [one(c) for c in configs]


def _least_squares(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        log.warning("singular design matrix (rank %d < %d); using ridge penalty %g",
                    np.linalg.matrix_rank(X), p, RIDGE_PENALTY)
        return np.linalg.solve(X.T @ X + RIDGE_PENALTY * np.eye(p), X.T @ y)
    return np.linalg.lstsq(X, y, rcond=None)[0]


def fit_perf_models(records: Sequence[ProfileRecord]) -> PerfModel:
    if len(records) < 2:
        raise ValueError(f"need at least 2 profile records, got {len(records)}")
    X = np.stack([featurize(r.config) for r in records])
    fits = [_least_squares(X, np.array([r.target(m) for r in records])) for m in METRICS]
    return PerfModel(*fits)


def predict_metrics(pm: PerfModel, config: PCConfig) -> tuple[float, float, float]:
    f = featurize(config)
    return float(pm.accuracy @ f), float(pm.memory @ f), float(pm.latency @ f)


def r_squared(pm: PerfModel, records: Sequence[ProfileRecord], metric: str) -> float:
    w = getattr(pm, metric)
    y = np.array([r.target(metric) for r in records])
    pred = np.array([w @ featurize(r.config) for r in records])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


# --- genetic search ---------------------------------------------------------
#
# An individual is an int row: [interval index, num_experts x L, strategy x L]
# with strategy 1 meaning exchange.

def _encode(config: PCConfig, shape: ModelShape) -> np.ndarray:
    return np.array(
        [shape.intervals.index(config.interval)] + list(config.num_experts)
        + [1 if s is Strategy.EXCHANGE else 0 for s in config.strategies],
        dtype=np.int64,
    )


def _decode(row: np.ndarray, shape: ModelShape) -> PCConfig:
    L = shape.num_layers
    return PCConfig(
        shape.intervals[int(row[0])],
        [int(c) for c in row[1:1 + L]],
        [Strategy.EXCHANGE if s else Strategy.SKIP for s in row[1 + L:]],
    )


class _Genome:
    def __init__(self, shape: ModelShape):
        self.shape = shape
        L = shape.num_layers
        self.L = L
        self.low = np.array([0] + [1] * L + [0] * L)
        self.high = np.array([len(shape.intervals) - 1] + list(shape.experts_per_layer) + [1] * L)
        self.inv_interval = 1.0 / np.asarray(shape.intervals, dtype=np.float64)

    def random(self, rng, count):
        return rng.integers(self.low, self.high + 1, size=(count, len(self.low)))

    def features(self, pop):
        L = self.L
        return np.column_stack([
            np.ones(len(pop)),
            pop[:, 1:1 + L].astype(np.float64),
            pop[:, 1 + L:].astype(np.float64),
            self.inv_interval[pop[:, 0]],
        ])

    def mutate(self, rng, pop, rate):
        """Each selected individual gets one field redrawn from its domain."""
        chosen = pop[rng.random(len(pop)) < rate].copy()
        if len(chosen) == 0:
            return chosen
        fields = rng.integers(0, chosen.shape[1], size=len(chosen))
        rows = np.arange(len(chosen))
        chosen[rows, fields] = rng.integers(self.low[fields], self.high[fields] + 1)
        return chosen

    def crossover(self, rng, pop, rate):
        """Field-wise exchange with a random partner, or per-layer averaging
        of committee sizes (coin flip per pair)."""
        n = len(pop)
        mask = rng.random(n) < rate
        if not mask.any():
            return pop[:0]
        a = pop[mask]
        b = pop[rng.integers(0, n, size=len(a))]
        swap = rng.random(a.shape) < 0.5
        exchanged = np.where(swap, b, a)
        averaged = a.copy()
        L = self.L
        averaged[:, 1:1 + L] = (a[:, 1:1 + L] + b[:, 1:1 + L] + 1) // 2
        use_avg = (rng.random(len(a)) < 0.5)[:, None]
        return np.where(use_avg, averaged, exchanged)


@dataclass
class SearchResult:
    config: Optional[PCConfig]
    predicted: Optional[tuple[float, float, float]]
    generations_run: int
    seed: int

    @property
    def feasible(self) -> bool:
        return self.config is not None

    def report(self) -> dict:
        pred = None
        if self.predicted is not None:
            pred = dict(zip(("acc", "mem", "lat"), self.predicted))
        return {"predicted": pred, "feasible": self.feasible,
                "generations_run": self.generations_run, "seed": self.seed}


def genetic_search(pm: PerfModel, constraints: Constraints, shape: ModelShape,
                   ga: GaParams = GaParams(), margin: float = 0.0,
                   observer: Optional[Callable[[np.ndarray], None]] = None) -> SearchResult:
    """Maximise predicted accuracy under predicted memory/latency limits.

    ``margin`` shrinks both limits by that fraction. The result's config is
    ``None`` when no feasible individual was ever seen. ``observer`` is
    called with each generation's encoded population.
    """
    rng = np.random.default_rng(ga.seed)
    genome = _Genome(shape)
    W = pm.weights().T  # feature_dim x 3
    lim_mem = constraints.limit_memory * (1.0 - margin)
    lim_lat = constraints.limit_latency * (1.0 - margin)

    def evaluate(pop):
        pred = genome.features(pop) @ W
        violation = np.maximum(pred[:, 1] - lim_mem, 0) / lim_mem + np.maximum(pred[:, 2] - lim_lat, 0) / lim_lat
        return pred, violation

    pop = genome.random(rng, ga.population)
    best_row, best_pred = None, None
    for _ in range(ga.generations):
        pool = np.concatenate([
            pop,
            genome.mutate(rng, pop, ga.mutation_rate),
            genome.crossover(rng, pop, ga.crossover_rate),
        ])
        # duplicates would let one config crowd out the whole population
        pool = np.unique(pool, axis=0)
        pred, violation = evaluate(pool)
        feasible = violation == 0
        # feasible first by descending accuracy; infeasible by ascending violation
        order = np.lexsort((np.where(feasible, 0.0, violation), np.where(feasible, -pred[:, 0], 0.0), ~feasible))
        pop = pool[order[:ga.population]]
        if observer is not None:
            observer(pop)
        if feasible[order[0]]:
            top = order[0]
            if best_pred is None or pred[top, 0] > best_pred[0]:
                best_row, best_pred = pool[top].copy(), pred[top].copy()

    if best_row is None:
        return SearchResult(None, None, ga.generations, ga.seed)
    return SearchResult(_decode(best_row, shape), tuple(float(v) for v in best_pred), ga.generations, ga.seed)


def exhaustive_search(pm: PerfModel, constraints: Constraints, shape: ModelShape) -> SearchResult:
    """Brute-force optimum over the whole configuration space."""
    best, best_pred = None, None
    for config in all_configs(shape):
        acc, mem, lat = predict_metrics(pm, config)
        if mem <= constraints.limit_memory and lat <= constraints.limit_latency:
            if best_pred is None or acc > best_pred[0]:
                best, best_pred = config, (acc, mem, lat)
    return SearchResult(best, best_pred, 0, 0)


def save_records(records: Sequence[ProfileRecord], path, shape: Optional[ModelShape] = None) -> None:
    doc = {"records": [r.to_dict() for r in records]}
    if shape is not None:
        doc["shape"] = shape.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2))


def load_records(path) -> tuple[list[ProfileRecord], Optional[ModelShape]]:
    doc = json.loads(Path(path).read_text())
    shape = ModelShape.from_dict(doc["shape"]) if "shape" in doc else None
    return [ProfileRecord.from_dict(r) for r in doc["records"]], shape


def load_constraints(path) -> Constraints:
    return Constraints.from_dict(json.loads(Path(path).read_text()))
