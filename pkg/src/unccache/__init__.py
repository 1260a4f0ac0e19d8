"""Entropy-guided KV-cache compression for a desk-scale transformer."""
from .entropy import (
    Spectrum,
    covariance,
    effective_rank,
    elbow_index,
    pearson,
    renyi_entropy,
    spectrum,
    truncated_entropy,
    truncated_erank,
    von_neumann_entropy,
)
from .model import Model, ModelConfig, decode_step, generate, init_weights, load_bundle, prefill, save_bundle
from .planner import CompressionPlan, PlanConfig, build_plan, head_schedule, layer_schedule, load_plan, save_plan
from .policies import make_policy

__version__ = "0.1.0"
