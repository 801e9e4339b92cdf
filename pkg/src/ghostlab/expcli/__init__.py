"""Experiment presets, sweep execution and the command-line entry point."""
from .config import ExperimentConfig, KINDS, derive_seed, preset, resolved_config
from .sweep import RunSummary, SweepResult
from .runners import (run_check, run_custom, run_experiment, run_fig2, run_fig2a,
                      run_fig3, run_fig4, run_figS1, run_figS2)
from .cli import cli_main

__all__ = [
    "ExperimentConfig", "KINDS", "derive_seed", "preset", "resolved_config",
    "RunSummary", "SweepResult", "run_check", "run_custom", "run_experiment",
    "run_fig2", "run_fig2a", "run_fig3", "run_fig4", "run_figS1", "run_figS2",
    "cli_main",
]
