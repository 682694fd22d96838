"""Acceptance criteria, one test each.

Every test prints a ``PASS``/``FAIL`` line with the measured numbers, so
``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``)
doubles as a report. Lines bypass pytest's output capture.
"""

import itertools
import sys
import threading
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import (  # noqa: E402
    GATES, MULT, TOKENS, brute_importance, exchange_symbolic, random_layer, random_model,
    random_sample, scalar_layer, skip_symbolic,
)
from pcmoe.committee import (  # noqa: E402
    CommitteeState, LayerCommittee, PCConfig, handle_exchange, handle_skip, importance_scores,
)
from pcmoe.moe import model_forward_reference  # noqa: E402
from pcmoe.planner import (  # noqa: E402
    Constraints, GaParams, ModelShape, all_configs, exhaustive_search, fit_perf_models, genetic_search,
    predict_metrics, r_squared, random_configs, run_profile,
)
from pcmoe.serving import (  # noqa: E402
    MAGNITUDE_KEEP, ON_DEMAND, PC, RANDOM_KEEP, REFERENCE, ServePolicy, keep_count, serve_trace,
)
from pcmoe.swap import CostModelParams, SwapEngine, ThreadedLoader, advance, commit_completed  # noqa: E402
from pcmoe.workload import Trace, TraceSpec, gen_model, gen_trace  # noqa: E402

COST = CostModelParams(compute_throughput=1e5, io_bandwidth=1e5, base_latency=1.0)
SEEDS = range(10)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return emit


# --- 1. full committees reproduce the dense reference ---------------------

def test_c1_full_committee_oracle(verdict):
    rng = np.random.default_rng(1)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(20):
        L, n = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        d, h = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        model = random_model(rng, L, n, d, h, int(rng.integers(1, n + 1)))
        trace = Trace([random_sample(rng, d, int(rng.integers(1, 5))) for _ in range(20)])
        refs = [model_forward_reference(model, s)[0] for s in trace.samples]
        for strategy in ("skip", "exchange"):
            cfg = PCConfig(int(rng.choice([1, 2, 4])), [n] * L, [strategy] * L)
            rep = serve_trace(model, trace, ServePolicy(PC, config=cfg), COST)
            worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(rep.logits, refs)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    assert verdict(1, ok, f"max |PC - reference| = {worst:.2e} (tol 1e-12), {elapsed:.2f}s (< 10s)")


# --- 2. importance scores vs token loop ------------------------------------

def test_c2_importance_bitwise(verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        d = int(rng.integers(2, 9))
        layer = random_layer(rng, d, int(rng.integers(2, 9)), n, k)
        tokens = list(rng.standard_normal((int(rng.integers(1, 9)), d)))
        mags = [e.cached_magnitude for e in layer.experts]
        got = importance_scores(layer, tokens, mags, k)
        mismatches += got.tobytes() != brute_importance(layer, tokens, mags, k).tobytes()
    assert verdict(2, mismatches == 0, f"{mismatches}/100 layer/sample pairs differ bitwise from brute force")


# --- 3. skip / exchange vs closed forms ------------------------------------

def test_c3_skip_exchange_symbolic(verdict):
    worst, cases = 0.0, 0
    for k in (1, 2):
        layer = scalar_layer(MULT, GATES, k)
        for r in range(4):
            for resident in itertools.combinations(range(3), r):
                res = set(resident)
                for x in TOKENS:
                    (y,) = handle_skip(layer, [np.array([x])], res, k)
                    worst = max(worst, abs(y[0] - skip_symbolic(MULT, GATES, res, k, x)))
                    cases += 1
                    if res:
                        (y,) = handle_exchange(layer, [np.array([x])], res, k)
                        worst = max(worst, abs(y[0] - exchange_symbolic(MULT, GATES, res, k, x)))
                        cases += 1
    assert verdict(3, worst <= 1e-12, f"max deviation {worst:.2e} over {cases} cases (tol 1e-12)")


# --- 4. amortized loading ----------------------------------------------------

def test_c4_amortization(verdict):
    rng = np.random.default_rng(4)
    model = random_model(rng, 1, 16, 4, 6, 2)
    engine = SwapEngine(model, [list(range(8))], COST)
    state = CommitteeState([LayerCommittee(list(range(8)))])
    target = list(range(8, 16))
    engine.submit(0, target, 4)
    state.layers[0].pending = list(target)
    loads, ios = [], []
    for t in range(4):
        before = set(engine.store.resident(0))
        io = engine.load_step()
        m = engine.charge(t, io, 1000, (t + 1) % 4 == 0)
        engine.commit(state)
        loads.append(len(set(engine.store.resident(0)) - before))
        ios.append(m.io_bytes)
    ok = (loads == [2] * 4 and ios == [2 * model.expert_bytes] * 4
          and set(engine.store.resident(0)) == set(target) and state.layers[0].pending == [])
    assert verdict(4, ok, f"loads/sample {loads}, io/sample {ios} (2 x {model.expert_bytes}), "
                          f"resident==target: {set(engine.store.resident(0)) == set(target)}")


# --- 5. swap atomicity -------------------------------------------------------

def _visible_ok(engine, layer):
    wh = engine.warehouse
    return all(p.flat().tobytes() == wh.peek(layer, i).flat().tobytes() for i, p in engine.store.view(layer).items())


def test_c5_atomicity_fuzz(verdict):
    rng = np.random.default_rng(5)
    model = random_model(rng, 2, 8, 4, 5, 2)
    engine = SwapEngine(model, [[0, 1, 2, 3], [4, 5, 6, 7]], COST)
    state = CommitteeState([LayerCommittee([0, 1, 2, 3]), LayerCommittee([4, 5, 6, 7])])
    bad, checks = 0, 0

    # concurrent reader hammering views while the fuzzer swaps
    stop = threading.Event()
    reader_bad = []

    def reader():
        while not stop.is_set():
            for l in (0, 1):
                if not _visible_ok(engine, l):
                    reader_bad.append(l)

    th = threading.Thread(target=reader)
    th.start()
    loader = ThreadedLoader(engine)
    try:
        for _ in range(1000):
            l = int(rng.integers(0, 2))
            op = rng.integers(0, 5)
            if op == 0:
                target = rng.permutation(8)[:4].tolist()
                engine.submit(l, target, int(rng.integers(1, 5)))
                state.layers[l].pending = [i for i in target if i not in engine.store.resident(l)]
            elif op == 1:
                loader.wait()  # one writer per plan
                advance(engine.warehouse, l, engine.plans[l])
            elif op == 2:
                loader.start(l)
            elif op == 3:
                loader.wait()
                commit_completed(engine.store, state, l, engine.plans[l])
            for ll in (0, 1):
                checks += 1
                bad += not _visible_ok(engine, ll)
                bad += len(engine.store.resident(ll)) != 4
    finally:
        loader.close()
        stop.set()
        th.join()
    ok = bad == 0 and not reader_bad
    assert verdict(5, ok, f"{bad} bad slots in {checks} synchronous checks, "
                          f"{len(reader_bad)} from the concurrent reader, over 1000 interleavings")


# --- 6. memory model ---------------------------------------------------------

@lru_cache(maxsize=None)
def profiled(n_experts, train, held_out):
    model = gen_model(6, 8, 2, n_experts, 2, 4, seed=6)
    trace = gen_trace(TraceSpec(16, 2, 2, 4, 0.3, "sequential", 6), model)
    shape = ModelShape.of(model, (1, 2))
    train_recs = run_profile(model, trace, random_configs(shape, train, seed=0), COST)
    test_recs = run_profile(model, trace, random_configs(shape, held_out, seed=1), COST)
    return shape, train_recs, test_recs


def test_c6_memory_model_r2(verdict):
    _, train, test = profiled(6, 32, 32)
    pm = fit_perf_models(train)
    r2 = r_squared(pm, test, "memory")
    assert verdict(6, r2 >= 0.999, f"held-out memory R^2 = {r2:.12f} on {len(test)} configs (>= 0.999)")


# --- 7. genetic search vs exhaustive ----------------------------------------

def test_c7_ga_optimality(verdict):
    shape, train, _ = profiled(4, 32, 1)
    pm = fit_perf_models(train)
    preds = np.array([predict_metrics(pm, c) for c in all_configs(shape)])
    cons = Constraints(float(np.quantile(preds[:, 1], 0.6)), float(np.quantile(preds[:, 2], 0.6)))
    opt = exhaustive_search(pm, cons, shape)
    assert opt.feasible
    t0, hits, violations = time.perf_counter(), 0, 0
    for seed in SEEDS:
        res = genetic_search(pm, cons, shape, GaParams(50, 0.5, 0.01, 5000, seed))
        if res.feasible:
            _, mem, lat = predict_metrics(pm, res.config)
            violations += mem > cons.limit_memory or lat > cons.limit_latency
            hits += abs(res.predicted[0] - opt.predicted[0]) <= 0.01 * abs(opt.predicted[0])
    elapsed = time.perf_counter() - t0
    ok = hits >= 9 and violations == 0 and elapsed < 60
    assert verdict(7, ok, f"{hits}/10 seeds within 1% of exhaustive optimum over {len(preds)} configs, "
                          f"{violations} constraint violations, {elapsed:.1f}s (< 60s)")


# --- 8-10. serving behaviour on clustered traces ----------------------------

def locality_setup(seed, order="sequential"):
    model = gen_model(16, 32, 2, 8, 2, 8, seed)
    trace = gen_trace(TraceSpec(96, 8, 4, 16, 0.5, order, seed), model)
    return model, trace


def pc_policy(ratio, n=8, L=2, interval=4):
    c = keep_count(ratio, n)
    return ServePolicy(PC, config=PCConfig(interval, [c] * L, ["exchange"] * L))


@lru_cache(maxsize=None)
def served(seed, order, policy_key):
    model, trace = locality_setup(seed, order)
    kind, ratio = policy_key
    policy = pc_policy(ratio) if kind == PC else ServePolicy(kind, ratio, seed=seed)
    return serve_trace(model, trace, policy, COST)


def test_c8_locality_effect(verdict):
    seq = [served(s, "sequential", (PC, 0.5)).accuracy for s in SEEDS]
    shf = [served(s, "shuffled", (PC, 0.5)).accuracy for s in SEEDS]
    ok = np.mean(seq) > np.mean(shf)
    assert verdict(8, ok, f"PC accuracy sequential {np.mean(seq):.4f} > shuffled {np.mean(shf):.4f} "
                          f"(drift 16, 50% committees, 10 seeds)")


def test_c9_baseline_dominance(verdict):
    acc = {k: np.mean([served(s, "sequential", (k, 0.5 if k != REFERENCE else 1.0)).accuracy for s in SEEDS])
           for k in (PC, RANDOM_KEEP, MAGNITUDE_KEEP, ON_DEMAND, REFERENCE)}
    od_exact = all(served(s, "sequential", (ON_DEMAND, 0.5)).accuracy
                   == served(s, "sequential", (REFERENCE, 1.0)).accuracy for s in SEEDS)
    lat_pc = np.mean([served(s, "sequential", (PC, 0.5)).metrics.mean_latency for s in SEEDS])
    lat_od = np.mean([served(s, "sequential", (ON_DEMAND, 0.5)).metrics.mean_latency for s in SEEDS])
    ok = acc[PC] >= acc[RANDOM_KEEP] and acc[PC] >= acc[MAGNITUDE_KEEP] and od_exact and lat_od > lat_pc
    assert verdict(9, ok, f"accuracy PC {acc[PC]:.4f} vs RandomKeep {acc[RANDOM_KEEP]:.4f}, "
                          f"MagnitudeKeep {acc[MAGNITUDE_KEEP]:.4f}; OnDemand {acc[ON_DEMAND]:.4f} == "
                          f"Reference {acc[REFERENCE]:.4f} on every seed: {od_exact}; "
                          f"latency OnDemand {lat_od:.4f} > PC {lat_pc:.4f} ms")


def test_c10_tradeoff_monotone(verdict):
    ratios = [1.0, 0.75, 0.5, 0.25]
    reps = [served(0, "sequential", (PC, r)) for r in ratios]
    mem = [r.metrics.peak_resident_bytes for r in reps]
    comp = [r.metrics.mean_compute_ms for r in reps]
    ref = served(0, "sequential", (REFERENCE, 1.0)).accuracy
    ok = (all(a >= b for a, b in zip(mem, mem[1:])) and all(a >= b for a, b in zip(comp, comp[1:]))
          and reps[0].accuracy == ref)
    assert verdict(10, ok, f"ratios {ratios}: peak memory {mem}, compute_ms "
                           f"{[round(c, 6) for c in comp]}, accuracy@100% {reps[0].accuracy} == reference {ref}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
