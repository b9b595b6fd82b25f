"""Point cloud types and rigid geometry operations.

Conventions used throughout the package:
  - points are float64 arrays of shape (N, 3), row per point, meters
  - a rigid transform maps source to target as q = R @ p + t
  - all arrays held by the value types are frozen (writeable=False) so
    instances can be shared across threads and processes safely
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DegenerateConfiguration,
    EmptyAnchors,
    InvalidWeights,
    KTooLarge,
    LengthMismatch,
    ShapeMismatch,
    UsageError,
)

# rank test for the cross-covariance: smallest two singular values below
# this fraction of the largest means the support is collinear/coincident
RANK_TOLERANCE = 1e-12

# inverse-distance interpolation regularizer
IDW_EPSILON = 1e-8


def _frozen(a, dtype=np.float64):
    out = np.array(a, dtype=dtype, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PointCloud:
    """Immutable point set with optional per-point descriptors."""

    points: np.ndarray
    descriptors: np.ndarray | None = None

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ShapeMismatch(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise UsageError("points contain non-finite values")
        object.__setattr__(self, "points", pts)
        if self.descriptors is not None:
            desc = _frozen(self.descriptors)
            if desc.ndim != 2 or desc.shape[0] != pts.shape[0]:
                raise ShapeMismatch(
                    f"descriptors must be (N, d), got {desc.shape} for N={pts.shape[0]}"
                )
            if not np.isfinite(desc).all():
                raise UsageError("descriptors contain non-finite values")
            object.__setattr__(self, "descriptors", desc)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation, q = R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("rotation must be (3, 3) and translation (3,)")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise UsageError("transform contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0.0:
            raise UsageError("rotation is not orthogonal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class FlowField:
    """Per-point displacement vectors, one row per source point."""

    vectors: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vectors)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeMismatch(f"flow vectors must be (N, 3), got {v.shape}")
        if not np.isfinite(v).all():
            raise UsageError("flow vectors contain non-finite values")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]


def kabsch_from_weighted_pairs(p, q, w):
    """Weighted least-squares rigid fit of q ~ R @ p + t.

    p, q are (K, 3) matched rows, w a (K,) nonnegative weight vector.
    Centering happens here; callers supply raw coordinates.
    """
    w_sum = float(w.sum())
    if w_sum <= 0.0:
        raise DegenerateConfiguration("total correspondence weight is zero")
    p_bar = (w[:, None] * p).sum(axis=0) / w_sum
    q_bar = (w[:, None] * q).sum(axis=0) / w_sum
    h = (w[:, None] * (p - p_bar)).T @ (q - q_bar)
    return _kabsch_from_moments(h, p_bar, q_bar)


def kabsch_from_dense_weights(p, q, weights):
    """Rigid fit where every (i, j) pair carries weight matrix entry w_ij.

    Equivalent to kabsch_from_weighted_pairs over all N*M pairs but
    computed with two matmuls instead of materializing the pair list.
    """
    w_sum = float(weights.sum())
    if w_sum <= 0.0:
        raise DegenerateConfiguration("total correspondence weight is zero")
    p_bar = weights.sum(axis=1) @ p / w_sum
    q_bar = weights.sum(axis=0) @ q / w_sum
    h = (p - p_bar).T @ (weights @ (q - q_bar))
    return _kabsch_from_moments(h, p_bar, q_bar)


def _kabsch_from_moments(h, p_bar, q_bar):
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] < RANK_TOLERANCE * s[0]:
        raise DegenerateConfiguration(
            "correspondence support is collinear or coincident"
        )
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rotation = v @ np.diag([1.0, 1.0, d]) @ u.T
    translation = q_bar - rotation @ p_bar
    return RigidTransform(rotation, translation)


def weighted_svd(source, target, correspondences):
    """Best rigid transform for weighted correspondences.

    correspondences is a sequence of (source_index, target_index, weight)
    triples. Raises InvalidWeights on negative or non-finite weights and
    DegenerateConfiguration when fewer than 3 positively weighted pairs
    remain or their support does not pin down a rotation.
    """
    corr = list(correspondences)
    if len(corr) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    si = np.array([c[0] for c in corr], dtype=np.int64)
    ti = np.array([c[1] for c in corr], dtype=np.int64)
    w = np.array([c[2] for c in corr], dtype=np.float64)
    if not np.isfinite(w).all() or (w < 0.0).any():
        raise InvalidWeights("weights must be finite and nonnegative")
    if int((w > 0.0).sum()) < 3:
        raise DegenerateConfiguration("need at least 3 strictly positive weights")
    n, m = len(source), len(target)
    if si.min() < 0 or si.max() >= n or ti.min() < 0 or ti.max() >= m:
        raise UsageError("correspondence index out of range")
    return kabsch_from_weighted_pairs(source.points[si], target.points[ti], w)


def warp_rigid(cloud, transform):
    """Apply a rigid transform to a cloud; descriptors ride along."""
    return PointCloud(transform.apply(cloud.points), cloud.descriptors)


def knn(query, reference, k):
    """Indices of the k nearest reference points for each query point.

    Returns an (Nq, k) integer array, nearest first, ties broken toward
    the smaller reference index.
    """
    q = query.points if isinstance(query, PointCloud) else np.asarray(query, dtype=np.float64)
    r = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=np.float64)
    if k < 1:
        raise UsageError("k must be at least 1")
    if k > r.shape[0]:
        raise KTooLarge(f"k={k} exceeds reference size {r.shape[0]}")
    indices, _ = kernels.knn(q, r, k)
    return indices


def interpolate_flow(source, anchors, k=3):
    """Dense flow from sparse anchors by inverse-distance weighting.

    anchors is a sequence of (source_index, displacement 3-vector)
    pairs. Each source point takes the weighted mean of its k nearest
    anchors' displacements with weights 1/(eps + distance). A point
    coinciding with an anchor receives exactly that anchor's
    displacement (first such anchor on ties). k is clamped to the
    anchor count.
    """
    pairs = list(anchors)
    if len(pairs) == 0:
        raise EmptyAnchors("no anchors given")
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    disp = np.array([np.asarray(p[1], dtype=np.float64) for p in pairs])
    if disp.ndim != 2 or disp.shape[1] != 3:
        raise LengthMismatch("anchor displacements must be 3-vectors")
    if k < 1:
        raise UsageError("k must be at least 1")
    n = len(source)
    if idx.min() < 0 or idx.max() >= n:
        raise UsageError("anchor index out of range")
    k_eff = min(k, idx.size)
    anchor_pos = source.points[idx]
    nn_idx, nn_dist = kernels.knn(source.points, anchor_pos, k_eff)
    weights = 1.0 / (IDW_EPSILON + nn_dist)
    flow = (weights[:, :, None] * disp[nn_idx]).sum(axis=1) / weights.sum(axis=1)[:, None]
    exact = nn_dist[:, 0] == 0.0
    if exact.any():
        flow[exact] = disp[nn_idx[exact, 0]]
    return FlowField(flow)


def random_rotation(rng):
    """Uniform rotation over SO(3) via normalized quaternion sampling."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def cloud_diameter(points):
    """Largest pairwise distance; chunked so big clouds stay in memory."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 1:
        return 0.0
    best = 0.0
    step = max(1, int(2**22) // max(n, 1))
    for start in range(0, n, step):
        block = kernels.pairwise_sqdist(pts[start : start + step], pts)
        best = max(best, float(block.max()))
    return float(np.sqrt(best))
