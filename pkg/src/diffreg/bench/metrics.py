"""Evaluation metrics for correspondence and flow quality.

Correspondence metrics (inlier ratio, matching recall under anchor
interpolation) measure predicted pairs against a scene's ground truth;
pose error compares rigid transforms; flow metrics score a dense
displacement field. Thresholded metrics always state their threshold in
the report rather than assuming a dataset convention.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyPredictionWarning, LengthMismatch, UsageError
from ..geometry import interpolate_flow
from .scenes import warp_gt

DEFAULT_TAU_FRACTION = 0.04

ACC_STRICT_ABS = 0.025
ACC_RELAXED_ABS = 0.05
ACC_REL = 0.05
OUTLIER_REL = 0.30
TINY_FLOW = 1e-9


def default_tau(pair):
    """Distance threshold: a fixed fraction of the scene diameter."""
    return DEFAULT_TAU_FRACTION * pair.scene_diameter


def _warn_empty(metric):
    warnings.warn(
        f"{metric} evaluated on an empty prediction; defined as 0",
        EmptyPredictionWarning,
        stacklevel=3,
    )


def inlier_ratio(pred, pair, tau=None):
    """Fraction of predicted pairs whose source point, warped by the
    ground truth, lands within tau of its predicted target point.

    Empty predictions score 0 with an EmptyPredictionWarning.
    """
    tau = default_tau(pair) if tau is None else float(tau)
    if tau <= 0.0:
        raise UsageError("tau must be positive")
    if len(pred.source_indices) == 0:
        _warn_empty("inlier_ratio")
        return 0.0
    warped = warp_gt(pair)[pred.source_indices]
    targets = pair.target.points[pred.target_indices]
    dist = np.linalg.norm(warped - targets, axis=1)
    return float((dist < tau).mean())


def nfmr(pred, pair, tau=None, k=3):
    """Ground-truth recovery rate using predictions as flow anchors.

    Each predicted pair (i, j) anchors the displacement target_j -
    source_i; every ground-truth source point's motion is interpolated
    from its k nearest anchors, and counts as recovered when the
    interpolated position lands within tau of its true target point.
    Empty predictions score 0 with an EmptyPredictionWarning.
    """
    tau = default_tau(pair) if tau is None else float(tau)
    if tau <= 0.0:
        raise UsageError("tau must be positive")
    if k < 1:
        raise UsageError("k must be at least 1")
    if pair.gt_pairs.shape[0] == 0:
        return 0.0
    if len(pred.source_indices) == 0:
        _warn_empty("nfmr")
        return 0.0
    anchor_disp = (
        pair.target.points[pred.target_indices]
        - pair.source.points[pred.source_indices]
    )
    interp = interpolate_flow(
        pair.source, zip(pred.source_indices, anchor_disp), k=k
    )
    u = pair.gt_pairs[:, 0]
    v = pair.gt_pairs[:, 1]
    reached = pair.source.points[u] + interp.vectors[u]
    dist = np.linalg.norm(reached - pair.target.points[v], axis=1)
    return float((dist < tau).mean())


def registration_errors(pred, gt):
    """(rotation error in degrees, translation error) between transforms."""
    cos = (np.trace(pred.rotation.T @ gt.rotation) - 1.0) / 2.0
    angle = math.degrees(math.acos(min(1.0, max(-1.0, cos))))
    return angle, float(np.linalg.norm(pred.translation - gt.translation))


def flow_metrics(pred_flow, pair):
    """(epe, acc_strict, acc_relaxed, outlier_ratio) against gt_flow.

    Per-point error e = |pred - gt|. Accuracy thresholds: strict when
    e < 0.025 or e/|gt| < 0.05, relaxed at 0.05 for the absolute arm;
    outliers have e/|gt| > 0.30. Points with |gt| < 1e-9 use only the
    absolute arms and are left out of the outlier ratio entirely.
    """
    if len(pred_flow) != len(pair.source):
        raise LengthMismatch("flow field length does not match the source cloud")
    gt = pair.gt_flow.vectors
    err = np.linalg.norm(pred_flow.vectors - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    measurable = gt_norm >= TINY_FLOW
    rel = np.zeros_like(err)
    np.divide(err, gt_norm, out=rel, where=measurable)

    epe = float(err.mean())
    acc_s = float(
        ((err < ACC_STRICT_ABS) | (measurable & (rel < ACC_REL))).mean()
    )
    acc_r = float(
        ((err < ACC_RELAXED_ABS) | (measurable & (rel < ACC_REL))).mean()
    )
    if measurable.any():
        outliers = float((rel[measurable] > OUTLIER_REL).mean())
    else:
        outliers = 0.0
    return epe, acc_s, acc_r, outliers


@dataclass
class MetricsReport:
    """All metrics for one registration run, plus the threshold used.

    runtime maps pipeline component names to seconds. It is excluded
    from to_dict by default so that primary result files stay
    byte-stable across runs; timing goes to its own file.
    """

    inlier_ratio: float
    nfmr: float
    rotation_error: float
    translation_error: float
    epe: float
    acc_s: float
    acc_r: float
    outlier_ratio: float
    tau: float
    runtime: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("inlier_ratio", "nfmr", "acc_s", "acc_r", "outlier_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1], got {value}")
        for name in ("rotation_error", "translation_error", "epe", "tau"):
            if getattr(self, name) < 0.0:
                raise UsageError(f"{name} must be nonnegative")

    _VALUE_FIELDS = (
        "inlier_ratio",
        "nfmr",
        "rotation_error",
        "translation_error",
        "epe",
        "acc_s",
        "acc_r",
        "outlier_ratio",
        "tau",
    )

    def to_dict(self, include_runtime=False):
        out = {name: getattr(self, name) for name in self._VALUE_FIELDS}
        if include_runtime:
            out["runtime"] = dict(self.runtime)
        return out

    @classmethod
    def from_dict(cls, data):
        values = {name: float(data[name]) for name in cls._VALUE_FIELDS}
        return cls(runtime=dict(data.get("runtime", {})), **values)
