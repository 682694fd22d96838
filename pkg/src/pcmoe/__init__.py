"""Serving sparse MoE models with a dynamic committee of resident experts."""

from .committee import CommitteeState, PCConfig, Strategy
from .moe import MoELayerSpec, MoEModelSpec, Sample
from .planner import Constraints, GaParams, PerfModel, genetic_search, fit_perf_models
from .serving import ServePolicy, ServeReport, serve_trace
from .swap import CostModelParams
from .workload import Trace, TraceSpec, gen_model, gen_trace

__version__ = "0.1.0"
