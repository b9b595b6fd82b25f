"""Synthetic benchmarks: scene generation, metrics, experiment harness."""

from .harness import (
    ExperimentConfig,
    ExperimentResult,
    estimate_transform,
    evaluate_matrix,
    extract_correspondences,
    run_experiment,
    run_trial,
    summarize,
    write_results,
)
from .metrics import (
    DEFAULT_TAU_FRACTION,
    MetricsReport,
    default_tau,
    flow_metrics,
    inlier_ratio,
    nfmr,
    registration_errors,
)
from .scenes import (
    GeneratorSpec,
    ScenePair,
    generate_scene,
    load_bundle,
    local_statistics_descriptors,
    save_bundle,
    warp_gt,
)

__all__ = [
    "DEFAULT_TAU_FRACTION",
    "ExperimentConfig",
    "ExperimentResult",
    "GeneratorSpec",
    "MetricsReport",
    "ScenePair",
    "default_tau",
    "estimate_transform",
    "evaluate_matrix",
    "extract_correspondences",
    "flow_metrics",
    "generate_scene",
    "inlier_ratio",
    "load_bundle",
    "local_statistics_descriptors",
    "nfmr",
    "registration_errors",
    "run_experiment",
    "run_trial",
    "save_bundle",
    "summarize",
    "warp_gt",
    "write_results",
]
