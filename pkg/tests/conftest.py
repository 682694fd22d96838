import math

import numpy as np
import pytest

from pcmoe.moe import ExpertParams, GateParams, MoELayerSpec, MoEModelSpec, Sample, gate_forward, route_topk
from pcmoe.numkit import magnitude
from pcmoe.swap import CostModelParams


def random_expert(rng, d, h, scale=1.0):
    return ExpertParams(
        scale * rng.standard_normal((h, d)),
        rng.standard_normal(h),
        scale * rng.standard_normal((d, h)),
        rng.standard_normal(d),
    )


def random_layer(rng, d, h, n, k):
    return MoELayerSpec(
        GateParams(rng.standard_normal((n, d))),
        [random_expert(rng, d, h, rng.uniform(0.3, 2.0)) for _ in range(n)],
        k,
    )


def random_model(rng, L, n, d, h, k, classes=3):
    layers = [random_layer(rng, d, h, n, k) for _ in range(L)]
    return MoEModelSpec(d, h, layers, rng.standard_normal((classes, d)), "toy", 0)


def random_sample(rng, d, T):
    return Sample(list(rng.standard_normal((T, d))))


def scalar_expert(a):
    """d = h = 1 expert computing ``a * x`` for x >= 0."""
    return ExpertParams([[1.0]], [0.0], [[a]], [0.0])


def scalar_layer(multipliers, gate_weights, k):
    """d = 1 layer; gate logits are ``gate_weights[i] * x``."""
    return MoELayerSpec(
        GateParams([[c] for c in gate_weights]),
        [scalar_expert(a) for a in multipliers],
        k,
    )


def scalar_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


# independent oracles shared by the unit and acceptance tests

def brute_importance(layer, tokens, mags, k):
    scores = np.zeros(layer.n)
    for i in range(layer.n):
        for x in tokens:
            g = gate_forward(layer.gate, x)
            if i in [j for j, _ in route_topk(g, k)]:
                scores[i] += magnitude(x) * g[i] * mags[i]
    return scores


def skip_symbolic(mult, gates, resident, k, x):
    g = scalar_softmax([c * x for c in gates])
    sel = sorted(range(len(g)), key=lambda i: (-g[i], i))[:k]
    return sum(g[i] * (mult[i] * x if i in resident else x) for i in sel)


def exchange_symbolic(mult, gates, resident, k, x):
    res = sorted(resident)
    e = {i: math.exp(gates[i] * x - max(gates[j] * x for j in res)) for i in res}
    z = sum(e.values())
    p = {i: e[i] / z for i in res}
    sel = sorted(res, key=lambda i: (-p[i], i))[:min(k, len(res))]
    return sum(p[i] * mult[i] * x for i in sel)


MULT = [1.5, -0.7, 2.3]
GATES = [0.4, 1.1, -0.6]
TOKENS = [0.3, 1.0, 2.5, 4.0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cost():
    return CostModelParams(compute_throughput=1e5, io_bandwidth=1e5, base_latency=1.0)
