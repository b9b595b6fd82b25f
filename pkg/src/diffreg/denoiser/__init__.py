"""Denoisers: map a noisy matching matrix and its scene to a clean estimate.

Every denoiser exposes predict(noisy, pair) -> MatchMatrix and
to_config() -> dict; build_denoiser reverses to_config. Two real
implementations exist (closed-form kernel features and the trained
attention net) plus an oracle that returns the ground-truth matrix,
which is useful as an upper bound and in sampler tests.
"""

import os
from typing import Protocol, runtime_checkable

from ..errors import UsageError
from ..matrixspace import ground_truth_matrix
from .analytic import AnalyticDenoiser, AnalyticFeatureNet
from .attention import (
    AttentionFeatureNet,
    AttentionParams,
    attention_backward,
    attention_forward,
    load_params,
    save_params,
)
from .pipeline import predict_target_matrix, soft_procrustes
from .positional import sinusoidal_encoding
from .training import (
    TrainedDenoiser,
    TrainingResult,
    load_training_state,
    loss_and_param_gradients,
    training_loss,
    save_training_state,
    sinkhorn_log_backward,
    sinkhorn_log_forward,
    train_denoiser,
)


@runtime_checkable
class Denoiser(Protocol):
    def predict(self, noisy, pair): ...

    def to_config(self): ...


class OracleDenoiser:
    """Returns the scene's ground-truth matrix, ignoring the noisy state."""

    kind = "oracle"

    def __init__(self, sinkhorn_iterations=10):
        self.sinkhorn_iterations = int(sinkhorn_iterations)

    def predict(self, noisy, pair):
        return ground_truth_matrix(pair, iterations=self.sinkhorn_iterations)

    def to_config(self):
        return {"kind": self.kind, "sinkhorn_iterations": self.sinkhorn_iterations}


def build_denoiser(config, base_dir=None):
    """Construct a denoiser from a config mapping.

    config["kind"] picks the implementation ("analytic" by default,
    "trained", or "oracle"); remaining keys are constructor arguments.
    Relative trained-weight paths resolve against base_dir.
    """
    config = dict(config or {})
    kind = config.pop("kind", "analytic")
    try:
        if kind == "analytic":
            return AnalyticDenoiser(**config)
        if kind == "oracle":
            return OracleDenoiser(**config)
        if kind == "trained":
            path = config.pop("params_path", None)
            if path is None:
                raise UsageError("trained denoiser config needs params_path")
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            config.pop("feature_dim", None)
            config.pop("n_layers", None)
            return TrainedDenoiser.from_file(path, **config)
    except TypeError as exc:
        raise UsageError(f"bad denoiser config for kind {kind!r}: {exc}") from exc
    raise UsageError(f"unknown denoiser kind {kind!r}")


__all__ = [
    "AnalyticDenoiser",
    "AnalyticFeatureNet",
    "AttentionFeatureNet",
    "AttentionParams",
    "Denoiser",
    "OracleDenoiser",
    "TrainedDenoiser",
    "TrainingResult",
    "attention_backward",
    "attention_forward",
    "build_denoiser",
    "load_params",
    "load_training_state",
    "loss_and_param_gradients",
    "training_loss",
    "predict_target_matrix",
    "save_params",
    "save_training_state",
    "sinkhorn_log_backward",
    "sinkhorn_log_forward",
    "sinusoidal_encoding",
    "soft_procrustes",
    "train_denoiser",
]
