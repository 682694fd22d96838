"""Toy sparse mixture-of-experts model and its reference forward pass.

The reference path runs every selected expert with the unmodified gate
weights. It is the oracle the committee runtime is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numkit import as_matrix, as_vector, magnitude, matvec, softmax, top_k_indices

MAGNITUDE_TOLERANCE = 1e-9

# (expert index, gate weight) pairs per token
Routing = list[tuple[int, float]]


class CorruptModelError(ValueError):
    pass


@dataclass
class ExpertParams:
    w1: np.ndarray  # h x d
    b1: np.ndarray  # h
    w2: np.ndarray  # d x h
    b2: np.ndarray  # d
    cached_magnitude: float = field(default=float("nan"))

    def __post_init__(self):
        self.w1 = as_matrix(self.w1)
        self.b1 = as_vector(self.b1)
        self.w2 = as_matrix(self.w2)
        self.b2 = as_vector(self.b2)
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (d, h) or self.b2.shape != (d,):
            raise ValueError(
                f"inconsistent expert shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )
        if np.isnan(self.cached_magnitude):
            self.cached_magnitude = magnitude(self.flat())

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def h(self) -> int:
        return self.w1.shape[0]

    @property
    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    @property
    def nbytes(self) -> int:
        return self.param_count * 8

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def copy(self) -> "ExpertParams":
        return ExpertParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.cached_magnitude,
        )


@dataclass
class GateParams:
    wg: np.ndarray  # n x d

    def __post_init__(self):
        self.wg = as_matrix(self.wg)

    @property
    def n(self) -> int:
        return self.wg.shape[0]


@dataclass
class MoELayerSpec:
    gate: GateParams
    experts: list[ExpertParams]
    k: int

    def __post_init__(self):
        if len(self.experts) != self.gate.n:
            raise ValueError(f"gate has {self.gate.n} rows but layer has {len(self.experts)} experts")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"k={self.k} must lie in [1, {self.n}]")
        dims = {(e.h, e.d) for e in self.experts}
        if len(dims) != 1:
            raise ValueError(f"experts disagree on (h, d): {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.experts)


@dataclass
class MoEModelSpec:
    d: int
    h: int
    layers: list[MoELayerSpec]
    head: np.ndarray  # num_classes x d
    model_id: str = "model"
    seed: int = 0

    def __post_init__(self):
        self.head = as_matrix(self.head)
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for i, layer in enumerate(self.layers):
            for e in layer.experts:
                if (e.h, e.d) != (self.h, self.d):
                    raise ValueError(f"layer {i}: expert dims {(e.h, e.d)} != model dims {(self.h, self.d)}")
            if layer.gate.wg.shape[1] != self.d:
                raise ValueError(f"layer {i}: gate width {layer.gate.wg.shape[1]} != d={self.d}")
        if self.head.shape[1] != self.d:
            raise ValueError(f"head width {self.head.shape[1]} != d={self.d}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.head.shape[0]

    @property
    def experts_per_layer(self) -> list[int]:
        return [layer.n for layer in self.layers]

    @property
    def expert_bytes(self) -> int:
        return self.layers[0].experts[0].nbytes

    @property
    def overhead_bytes(self) -> int:
        """Bytes that stay resident regardless of the committee (gates and head)."""
        return 8 * (self.head.size + sum(layer.gate.wg.size for layer in self.layers))

    @property
    def total_bytes(self) -> int:
        return self.overhead_bytes + sum(e.nbytes for layer in self.layers for e in layer.experts)


@dataclass
class Sample:
    tokens: list[np.ndarray]
    label: Optional[int] = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("a sample needs at least one token")
        self.tokens = [as_vector(t) for t in self.tokens]


def expert_forward(e: ExpertParams, x: np.ndarray) -> np.ndarray:
    hidden = matvec(e.w1, x) + e.b1
    np.maximum(hidden, 0.0, out=hidden)
    return matvec(e.w2, hidden) + e.b2


def gate_logits(g: GateParams, x: np.ndarray) -> np.ndarray:
    return matvec(g.wg, x)


def gate_forward(g: GateParams, x: np.ndarray) -> np.ndarray:
    return softmax(gate_logits(g, x))


def route_topk(gate_out: np.ndarray, k: int) -> Routing:
    return [(i, float(gate_out[i])) for i in top_k_indices(gate_out, k)]


def layer_forward_reference(layer: MoELayerSpec, tokens: list[np.ndarray]) -> list[np.ndarray]:
    return _layer_forward_routed(layer, tokens)[0]


def _layer_forward_routed(layer, tokens):
    outputs, routes = [], []
    for x in tokens:
        sel = route_topk(gate_forward(layer.gate, x), layer.k)
        y = np.zeros_like(x)
        for i, w in sel:
            y = y + w * expert_forward(layer.experts[i], x)
        outputs.append(y)
        routes.append(sel)
    return outputs, routes


def pool_logits(head: np.ndarray, tokens: list[np.ndarray]) -> np.ndarray:
    return matvec(head, np.mean(np.stack(tokens), axis=0))


def model_forward_reference(model: MoEModelSpec, sample: Sample) -> tuple[np.ndarray, list[list[Routing]]]:
    """Run all layers with full experts.

    Returns the head logits and, per layer and token, the top-k routing.
    """
    tokens = sample.tokens
    record = []
    for layer in model.layers:
        tokens, routes = _layer_forward_routed(layer, tokens)
        record.append(routes)
    return pool_logits(model.head, tokens), record


def expert_magnitudes(model: MoEModelSpec) -> list[list[float]]:
    out = []
    for l, layer in enumerate(model.layers):
        row = []
        for i, e in enumerate(layer.experts):
            fresh = magnitude(e.flat())
            if not abs(fresh - e.cached_magnitude) <= MAGNITUDE_TOLERANCE:
                raise CorruptModelError(
                    f"layer {l} expert {i}: cached magnitude {e.cached_magnitude!r} != recomputed {fresh!r}"
                )
            row.append(e.cached_magnitude)
        out.append(row)
    return out


# --- JSON model files -------------------------------------------------------

def model_to_dict(model: MoEModelSpec) -> dict:
    return {
        "model_id": model.model_id,
        "seed": model.seed,
        "d": model.d,
        "h": model.h,
        "num_classes": model.num_classes,
        "layers": [
            {
                "k": layer.k,
                "gate": {"wg": layer.gate.wg.tolist()},
                "experts": [
                    {
                        "w1": e.w1.tolist(),
                        "b1": e.b1.tolist(),
                        "w2": e.w2.tolist(),
                        "b2": e.b2.tolist(),
                        "magnitude": e.cached_magnitude,
                    }
                    for e in layer.experts
                ],
            }
            for layer in model.layers
        ],
        "head": model.head.tolist(),
    }


def model_from_dict(doc: dict) -> MoEModelSpec:
    layers = []
    for ld in doc["layers"]:
        experts = [
            ExpertParams(ed["w1"], ed["b1"], ed["w2"], ed["b2"],
                         float(ed.get("magnitude", float("nan"))))
            for ed in ld["experts"]
        ]
        layers.append(MoELayerSpec(GateParams(ld["gate"]["wg"]), experts, int(ld["k"])))
    model = MoEModelSpec(
        d=int(doc["d"]), h=int(doc["h"]), layers=layers, head=doc["head"],
        model_id=str(doc.get("model_id", "model")), seed=int(doc.get("seed", 0)),
    )
    if "num_classes" in doc and int(doc["num_classes"]) != model.num_classes:
        raise CorruptModelError(f"num_classes={doc['num_classes']} but head has {model.num_classes} rows")
    expert_magnitudes(model)
    return model


def dumps_model(model: MoEModelSpec) -> str:
    return json.dumps(model_to_dict(model))


def save_model(model: MoEModelSpec, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MoEModelSpec:
    return model_from_dict(json.loads(Path(path).read_text()))
