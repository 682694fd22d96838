"""``pcmoe`` command line driver.

Exit codes: 0 on success, 2 when the planner finds no feasible config,
1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import planner, serving, workload
from .committee import save_config
from .moe import load_model, save_model
from .swap import load_cost

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

log = logging.getLogger("pcmoe")


def cmd_gen_model(args) -> int:
    model = workload.gen_model(args.d, args.h, args.layers, args.experts, args.k, args.classes, args.seed)
    save_model(model, args.out)
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    model = load_model(args.model)
    spec = workload.TraceSpec(args.samples, args.tokens, args.clusters, args.drift,
                              args.noise, args.order, args.seed)
    workload.save_trace(workload.gen_trace(spec, model), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    model = load_model(args.model)
    trace = workload.load_trace(args.trace)
    policy = serving.ServePolicy.parse(args.policy)
    rep = serving.serve_trace(model, trace, policy, load_cost(args.cost))
    if args.metrics:
        rep.metrics.write_csv(args.metrics)
    if args.report:
        serving.save_report(rep, args.report)
    print(json.dumps(rep.row()))
    return EXIT_OK


def cmd_profile(args) -> int:
    model = load_model(args.model)
    trace = workload.load_trace(args.trace)
    shape = planner.ModelShape.of(model)
    prof = workload.profiling_trace(trace, min_length=max(shape.intervals) * 20)
    configs = planner.random_configs(shape, args.num_configs, args.seed)
    records = planner.run_profile(model, prof, configs, load_cost(args.cost), workers=args.workers)
    planner.save_records(records, args.out, shape)
    return EXIT_OK


def cmd_plan(args) -> int:
    records, shape = planner.load_records(args.records)
    if shape is None:
        raise ValueError(f"{args.records} carries no model shape")
    pm = planner.fit_perf_models(records)
    ga = planner.GaParams(generations=args.generations, seed=args.ga_seed)
    result = planner.genetic_search(pm, planner.load_constraints(args.constraints), shape, ga, args.margin)
    if args.report:
        Path(args.report).write_text(json.dumps(result.report(), indent=2))
    if not result.feasible:
        log.error("no configuration satisfies the constraints")
        return EXIT_INFEASIBLE
    save_config(result.config, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    docs = [json.loads(Path(p).read_text()) for p in args.inputs]
    serving.report(docs, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcmoe", description="Parameter-committee MoE serving toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="generate a synthetic MoE model")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--h", type=int, required=True)
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--experts", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_model)

    t = sub.add_parser("gen-trace", help="generate a labelled input trace")
    t.add_argument("--model", required=True)
    t.add_argument("--samples", type=int, required=True)
    t.add_argument("--tokens", type=int, required=True)
    t.add_argument("--clusters", type=int, required=True)
    t.add_argument("--drift", type=int, required=True)
    t.add_argument("--noise", type=float, default=0.3)
    t.add_argument("--order", default="sequential", help="sequential | speedup:<f> | shuffled")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_gen_trace)

    s = sub.add_parser("serve", help="replay a trace under a serving policy")
    s.add_argument("--model", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--policy", required=True,
                   help="reference | pc:<config.json> | random-keep:<r>:<seed> | magnitude-keep:<r> | on-demand:<r>")
    s.add_argument("--cost", required=True)
    s.add_argument("--metrics")
    s.add_argument("--report")
    s.set_defaults(func=cmd_serve)

    pr = sub.add_parser("profile", help="profile random committee configs")
    pr.add_argument("--model", required=True)
    pr.add_argument("--trace", required=True)
    pr.add_argument("--num-configs", type=int, default=64)
    pr.add_argument("--cost", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--workers", type=int, default=1)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_profile)

    pl = sub.add_parser("plan", help="fit performance models and search a config")
    pl.add_argument("--records", required=True)
    pl.add_argument("--constraints", required=True)
    pl.add_argument("--ga-seed", type=int, default=0)
    pl.add_argument("--generations", type=int, default=planner.GaParams.generations)
    pl.add_argument("--margin", type=float, default=0.0)
    pl.add_argument("--out", required=True)
    pl.add_argument("--report")
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("report", help="merge serve reports into a tradeoff table")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        log.error("%s", exc)
        if args.verbose:
            raise
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
