"""Experiment configuration, protocols, reports and the command line."""

from .config import ExperimentConfig, apply_overrides, layer_mask, load_config
from .report import compute_aggregates, emit_report, load_report, verify_report
from .runner import (
    PROTOCOLS,
    Workspace,
    ablation_adapter,
    ablation_injection,
    efficiency_probe,
    example_fraction_sweep,
    mi_analysis,
    run,
    sensitivity_suite,
)
