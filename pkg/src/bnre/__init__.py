"""Balanced neural ratio estimation for simulation-based inference.

Train amortized likelihood-to-evidence ratio classifiers (plain or with the
balancing penalty), evaluate grid posteriors, and diagnose them with
expected coverage, coverage AUC, expected log posterior, bias/variance, and
simulation-based calibration. Includes stochastic benchmark simulators and
an experiment harness with a CLI front end.
"""

from .diagnostics import (CoverageCurve, DiscreteToy, SbcResult, bias_variance,
                          coverage_auc, expected_coverage, expected_log_posterior,
                          hpd_threshold, run_theorem_battery, sbc_ranks,
                          verify_balance_theorems)
from .harness import ExperimentConfig, ResultsTable, lambda_sweep, run_experiment
from .nets import ClassifierNet, load_weights, save_weights
from .ratio import PosteriorGrid, log_posterior_at, log_ratio, posterior_grid
from .simulators import (Benchmark, Dataset, benchmark_names, generate_dataset,
                         get_benchmark, load_dataset, sample_prior, save_dataset,
                         simulate)
from .training import TrainConfig, TrainHistory, bce_loss, bnre_loss, train

__version__ = "0.1.0"

__all__ = [
    "Benchmark",
    "ClassifierNet",
    "CoverageCurve",
    "Dataset",
    "DiscreteToy",
    "ExperimentConfig",
    "PosteriorGrid",
    "ResultsTable",
    "SbcResult",
    "TrainConfig",
    "TrainHistory",
    "bce_loss",
    "benchmark_names",
    "bias_variance",
    "bnre_loss",
    "coverage_auc",
    "expected_coverage",
    "expected_log_posterior",
    "generate_dataset",
    "get_benchmark",
    "hpd_threshold",
    "lambda_sweep",
    "load_dataset",
    "load_weights",
    "log_posterior_at",
    "log_ratio",
    "posterior_grid",
    "run_experiment",
    "run_theorem_battery",
    "sample_prior",
    "save_dataset",
    "save_weights",
    "sbc_ranks",
    "simulate",
    "train",
    "verify_balance_theorems",
]
