"""Training-free feature network built from closed-form kernels.

The matching score it induces is a Gaussian position kernel gated by
descriptor similarity:

    logits[i, j]  ~  exp(-|p_i - q_j|^2 / (2 sigma^2)) * <F_i, F_j>

with descriptors normalized to unit length. Features realizing the
product exactly come from a factorization of the joint position Gram
matrix over both clouds tensored with the normalized descriptors: for
factor rows g and descriptors f, <g_i (x) f_i, g_j (x) f_j> equals
<g_i, g_j> <f_i, f_j>, the position kernel times descriptor similarity.
A random Fourier map would also approximate the position kernel but its
~D^-1/2 error floor swamps the kernel's own dynamic range; the exact
factorization keeps ratios like e^50 representable.
"""

import logging

import numpy as np

from .. import kernels
from ..errors import NumericError, UsageError

log = logging.getLogger("diffreg.denoiser")


def normalize_rows(vectors, tiny=1e-12):
    """Unit-normalize rows; all-zero rows stay zero."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(norms > tiny, v / np.where(norms > tiny, norms, 1.0), 0.0)


def gaussian_gram_factor(points, bandwidth):
    """Matrix L with L @ L.T equal to the Gaussian kernel Gram of points.

    Cholesky with escalating diagonal jitter; falls back to a clipped
    eigendecomposition when the Gram resists factorization outright.
    """
    if bandwidth <= 0.0:
        raise UsageError("bandwidth must be positive")
    gram = np.exp(kernels.pairwise_sqdist(points, points) / (-2.0 * bandwidth**2))
    eye = np.eye(gram.shape[0])
    jitter = 1e-12
    for _ in range(6):
        try:
            return np.linalg.cholesky(gram + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 100.0
    vals, vecs = np.linalg.eigh(gram)
    if not np.isfinite(vals).all():
        raise NumericError("position Gram matrix is not factorizable")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class AnalyticFeatureNet:
    """Kernel-product features over a fixed position bandwidth.

    feature dim is (N + M) * descriptor_dim; the factored logits path
    avoids materializing that tensor product and agrees with the
    explicit-feature path to machine precision.
    """

    logit_domain = "plain"
    encoding_dim = None  # positions enter through the kernel, not a table

    def __init__(self, bandwidth):
        if bandwidth <= 0.0:
            raise UsageError("bandwidth must be positive")
        self.bandwidth = float(bandwidth)

    def features(self, src_points, tgt_points, src_desc, tgt_desc,
                 src_encoding=None, tgt_encoding=None):
        n = src_points.shape[0]
        union = np.vstack([src_points, tgt_points])
        factor = gaussian_gram_factor(union, self.bandwidth)
        fs_pos, ft_pos = factor[:n], factor[n:]
        fs_desc = normalize_rows(src_desc)
        ft_desc = normalize_rows(tgt_desc)
        fs = (fs_pos[:, :, None] * fs_desc[:, None, :]).reshape(n, -1)
        ft = (ft_pos[:, :, None] * ft_desc[:, None, :]).reshape(tgt_points.shape[0], -1)
        return fs, ft

    def logits(self, src_points, tgt_points, src_desc, tgt_desc,
               src_encoding=None, tgt_encoding=None):
        sqd = kernels.pairwise_sqdist(src_points, tgt_points)
        position_kernel = np.exp(sqd / (-2.0 * self.bandwidth**2))
        similarity = normalize_rows(src_desc) @ normalize_rows(tgt_desc).T
        dim = (src_points.shape[0] + tgt_points.shape[0]) * src_desc.shape[1]
        return position_kernel * similarity / np.sqrt(dim)


class AnalyticDenoiser:
    """Denoiser whose clean-matrix prediction needs no training.

    The position bandwidth adapts to the state being denoised. A rigid
    fit of the current weights gives a weighted RMS residual between the
    warped source and the target; the kernel width is that residual
    times residual_gain, floored at bandwidth_fraction times the scene
    diameter. Early states fit badly, so the kernel opens up and
    descriptor similarity drives the matching; once the chain has locked
    the pose the residual shrinks and the narrow kernel separates points
    with look-alike descriptors.
    """

    def __init__(self, bandwidth_fraction=0.15, residual_gain=2.0,
                 sinkhorn_iterations=10, procrustes_mode="all",
                 procrustes_topk=128):
        if bandwidth_fraction <= 0.0:
            raise UsageError("bandwidth_fraction must be positive")
        if residual_gain < 0.0:
            raise UsageError("residual_gain must be non-negative")
        self.bandwidth_fraction = float(bandwidth_fraction)
        self.residual_gain = float(residual_gain)
        self.sinkhorn_iterations = int(sinkhorn_iterations)
        self.procrustes_mode = procrustes_mode
        self.procrustes_topk = int(procrustes_topk)

    def _bandwidth_for_state(self, noisy, pair):
        from .pipeline import soft_procrustes

        floor = self.bandwidth_fraction * pair.scene_diameter
        if self.residual_gain == 0.0:
            return floor
        from ..matrixspace import MatchMatrix, project_array

        smoothed = MatchMatrix(project_array(noisy.entries, self.sinkhorn_iterations))
        transform = soft_procrustes(
            smoothed, pair, self.procrustes_mode, self.procrustes_topk
        )
        warped = transform.apply(pair.source.points)
        sqd = kernels.pairwise_sqdist(warped, pair.target.points)
        mass = smoothed.entries.sum()
        if mass <= 0.0:
            return max(floor, self.residual_gain * pair.scene_diameter)
        residual = np.sqrt((smoothed.entries * sqd).sum() / mass)
        return max(floor, self.residual_gain * residual)

    def predict(self, noisy, pair):
        from .pipeline import predict_target_matrix

        net = AnalyticFeatureNet(self._bandwidth_for_state(noisy, pair))
        return predict_target_matrix(
            noisy,
            pair,
            net,
            sinkhorn_iterations=self.sinkhorn_iterations,
            procrustes_mode=self.procrustes_mode,
            procrustes_topk=self.procrustes_topk,
        )

    def to_config(self):
        return {
            "kind": "analytic",
            "bandwidth_fraction": self.bandwidth_fraction,
            "residual_gain": self.residual_gain,
            "sinkhorn_iterations": self.sinkhorn_iterations,
            "procrustes_mode": self.procrustes_mode,
            "procrustes_topk": self.procrustes_topk,
        }
