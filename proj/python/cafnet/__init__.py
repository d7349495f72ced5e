"""Radar-camera depth fusion pipeline.

Thin package over the native module: synthetic data generation, radar
confidence ground truth, two-stage fusion network training, evaluation,
ablations and single-frame inference.
"""

from ._cafnet import (
    ConfigError,
    DataError,
    NumericError,
    __version__,
    ablate,
    ablation_variants,
    compute_metrics,
    dataset_hash,
    evaluate,
    generate_data,
    infer,
    load_frame_grids,
    make_gt,
    run_model,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "__version__",
    "ablate",
    "ablation_variants",
    "compute_metrics",
    "dataset_hash",
    "evaluate",
    "generate_data",
    "infer",
    "load_frame_grids",
    "make_gt",
    "run_model",
    "train",
]
