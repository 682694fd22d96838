"""Parameter committee: the per-layer set of resident experts and how requests
to experts outside it are served.

Only committee experts are ever evaluated. Requests routed to other experts
are either skipped (the token passes through, weighted by its gate value) or
exchanged (those experts are masked out of the gate before top-k).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .moe import ExpertParams, MoELayerSpec, Routing, expert_forward, gate_logits
from .numkit import MASKED, magnitude, softmax, top_k_indices


class Strategy(enum.Enum):
    SKIP = "skip"
    EXCHANGE = "exchange"


@dataclass
class PCConfig:
    interval: int
    num_experts: list[int]
    strategies: list[Strategy]

    def __post_init__(self):
        self.strategies = [Strategy(s) for s in self.strategies]
        self.num_experts = [int(c) for c in self.num_experts]
        if self.interval < 1:
            raise ValueError(f"interval must be positive, got {self.interval}")
        if len(self.num_experts) != len(self.strategies):
            raise ValueError("num_experts and strategies must have one entry per layer")

    def validate(self, experts_per_layer: Sequence[int]) -> None:
        if len(self.num_experts) != len(experts_per_layer):
            raise ValueError(f"config has {len(self.num_experts)} layers, model has {len(experts_per_layer)}")
        for l, (c, n) in enumerate(zip(self.num_experts, experts_per_layer)):
            if not 1 <= c <= n:
                raise ValueError(f"layer {l}: num_experts={c} outside [1, {n}]")

    def to_dict(self) -> dict:
        return {
            "interval": self.interval,
            "num_experts": list(self.num_experts),
            "strategies": [s.value for s in self.strategies],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PCConfig":
        return cls(int(doc["interval"]), list(doc["num_experts"]), list(doc["strategies"]))

    def key(self) -> tuple:
        return (self.interval, tuple(self.num_experts), tuple(s.value for s in self.strategies))


def load_config(path) -> PCConfig:
    return PCConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: PCConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))


@dataclass
class LayerCommittee:
    resident: list[int]
    pending: list[int] = field(default_factory=list)
    version: int = 0
    last_scores: Optional[np.ndarray] = None


@dataclass
class CommitteeState:
    layers: list[LayerCommittee]
    sample_counter: int = 0

    @classmethod
    def cold_start(cls, magnitudes: Sequence[Sequence[float]], config: PCConfig) -> "CommitteeState":
        """Initial committee: the largest-magnitude experts of each layer."""
        return cls([
            LayerCommittee(select_committee(np.asarray(mags), c))
            for mags, c in zip(magnitudes, config.num_experts)
        ])


@dataclass
class ImportanceReport:
    scores: list[np.ndarray]
    assigned_tokens: list[list[int]]


def importance_scores(layer: MoELayerSpec, tokens: Sequence[np.ndarray],
                      magnitudes: Sequence[float], k: int) -> np.ndarray:
    """Per-expert score: sum over tokens routed to the expert (by the unmasked
    gate) of ``|x| * G(x)_i * |E_i|``."""
    if len(magnitudes) != layer.n:
        raise ValueError(f"expected {layer.n} magnitudes, got {len(magnitudes)}")
    scores = np.zeros(layer.n)
    for x in tokens:
        g = softmax(gate_logits(layer.gate, x))
        norm_x = magnitude(x)
        for i in top_k_indices(g, k):
            scores[i] += norm_x * g[i] * magnitudes[i]
    return scores


def importance_report(layers: Sequence[MoELayerSpec], layer_tokens: Sequence[Sequence[np.ndarray]],
                      magnitudes: Sequence[Sequence[float]]) -> ImportanceReport:
    scores, counts = [], []
    for layer, tokens, mags in zip(layers, layer_tokens, magnitudes):
        scores.append(importance_scores(layer, tokens, mags, layer.k))
        c = [0] * layer.n
        for x in tokens:
            for i in top_k_indices(softmax(gate_logits(layer.gate, x)), layer.k):
                c[i] += 1
        counts.append(c)
    return ImportanceReport(scores, counts)


def select_committee(scores: np.ndarray, count: int) -> list[int]:
    return top_k_indices(scores, count)


def masked_selection(logits: np.ndarray, resident, k: int) -> Routing:
    """Top-k over a softmax restricted to the resident experts.

    Takes raw gate logits; non-resident entries are masked before the softmax
    so the returned weights are renormalised over the committee.
    """
    resident = set(resident)
    if not resident:
        raise ValueError("committee is empty")
    masked = np.full(len(logits), MASKED)
    idx = sorted(resident)
    masked[idx] = np.asarray(logits)[idx]
    probs = softmax(masked)
    return [(i, float(probs[i])) for i in top_k_indices(probs, min(k, len(resident)))]


def _resolve(layer: MoELayerSpec, params: Optional[Mapping[int, ExpertParams]]):
    return params if params is not None else dict(enumerate(layer.experts))


def _skip_forward(layer, tokens, resident, k, params=None):
    params = _resolve(layer, params)
    resident = set(resident)
    outputs, evals = [], 0
    for x in tokens:
        g = softmax(gate_logits(layer.gate, x))
        y = np.zeros_like(x)
        for i in top_k_indices(g, k):
            if i in resident:
                y = y + g[i] * expert_forward(params[i], x)
                evals += 1
            else:
                y = y + g[i] * x
        outputs.append(y)
    return outputs, evals


def _exchange_forward(layer, tokens, resident, k, params=None):
    params = _resolve(layer, params)
    outputs, evals = [], 0
    for x in tokens:
        y = np.zeros_like(x)
        for i, w in masked_selection(gate_logits(layer.gate, x), resident, k):
            y = y + w * expert_forward(params[i], x)
            evals += 1
        outputs.append(y)
    return outputs, evals


def handle_skip(layer: MoELayerSpec, tokens, resident, k: int,
                params: Optional[Mapping[int, ExpertParams]] = None) -> list[np.ndarray]:
    """Selected experts outside the committee contribute ``G(x)_j * x``."""
    return _skip_forward(layer, tokens, resident, k, params)[0]


def handle_exchange(layer: MoELayerSpec, tokens, resident, k: int,
                    params: Optional[Mapping[int, ExpertParams]] = None) -> list[np.ndarray]:
    return _exchange_forward(layer, tokens, resident, k, params)[0]


def layer_forward_pc(layer: MoELayerSpec, tokens, state: CommitteeState, config: PCConfig,
                     magnitudes: Sequence[float], layer_index: int,
                     params: Optional[Mapping[int, ExpertParams]] = None,
                     ) -> tuple[list[np.ndarray], Optional[list[int]]]:
    """Forward one MoE layer with the current committee.

    On update boundaries (``sample_counter % interval == 0``) the importance
    of every expert is recomputed from this layer's input tokens and the
    experts that should join the committee are returned, most important
    first. The returned list replaces any stale pending list. Outside update
    boundaries the second element is ``None``.
    """
    outputs, _, request = _layer_forward_pc(layer, tokens, state, config, magnitudes, layer_index, params)
    return outputs, request


def _layer_forward_pc(layer, tokens, state, config, magnitudes, layer_index, params=None):
    lc = state.layers[layer_index]
    resident = lc.resident
    if config.strategies[layer_index] is Strategy.SKIP:
        outputs, evals = _skip_forward(layer, tokens, resident, layer.k, params)
    else:
        outputs, evals = _exchange_forward(layer, tokens, resident, layer.k, params)

    request = None
    if state.sample_counter % config.interval == 0:
        scores = importance_scores(layer, tokens, magnitudes, layer.k)
        target = select_committee(scores, config.num_experts[layer_index])
        current = set(resident)
        request = [i for i in target if i not in current]
        lc.pending = list(request)
        lc.last_scores = scores
    return outputs, evals, request
