"""Cross-well aligned masked siamese pretraining for cell-painting screens."""

from ._core import (
    ConfigError,
    IoError,
    NumericError,
    ShapeError,
    UsageError,
    assignment_scores,
    compound_gene_metrics,
    gene_gene_recall,
    generate_synthetic,
    load_ndt,
    msn_loss,
    parameter_count,
    run_cli,
    save_ndt,
    schedule,
)

__all__ = [
    "ConfigError",
    "IoError",
    "NumericError",
    "ShapeError",
    "UsageError",
    "assignment_scores",
    "compound_gene_metrics",
    "gene_gene_recall",
    "generate_synthetic",
    "load_ndt",
    "msn_loss",
    "parameter_count",
    "run_cli",
    "save_ndt",
    "schedule",
]
