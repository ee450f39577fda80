"""Compression of Mixture-of-Experts layers around an optimal-transport barycenter expert."""

__version__ = "0.1.0"

from .barycenter import BarycenterConfig, BarycenterResult, compute_barycenter, verify_proposition
from .codec import (
    CompressConfig,
    CompressedLayer,
    Method,
    compress_layer,
    compressed_forward,
    restore_expert,
    svd_rank_for_budget,
)
from .container import load_compressed, load_model, save_compressed, save_model
from .experts import Activation, ExpertWeights, Kind, MoELayer, expert_forward, layer_forward
from .metrics import approx_error, emit_report, flops_report, memory_report, table9_rows
from .ot import align, cost_matrix, solve_assignment
from .synth import Family, SynthSpec, generate, generate_model

__all__ = [
    "Activation",
    "BarycenterConfig",
    "BarycenterResult",
    "CompressConfig",
    "CompressedLayer",
    "ExpertWeights",
    "Family",
    "Kind",
    "Method",
    "MoELayer",
    "SynthSpec",
    "align",
    "approx_error",
    "compress_layer",
    "compressed_forward",
    "compute_barycenter",
    "cost_matrix",
    "emit_report",
    "expert_forward",
    "flops_report",
    "generate",
    "generate_model",
    "layer_forward",
    "load_compressed",
    "load_model",
    "memory_report",
    "restore_expert",
    "save_compressed",
    "save_model",
    "solve_assignment",
    "svd_rank_for_budget",
    "table9_rows",
    "verify_proposition",
]
