"""Numpy implementations of the kernel primitives.

Active when the compiled extension is unavailable or DIFFREG_PURE_PYTHON=1.
Semantics match diffreg.kernels._core (including nearest-neighbor tie
handling); only summation order may differ in the last ulp.
"""

import numpy as np


def pairwise_sqdist(x, y):
    """Squared Euclidean distances between rows of x (N,D) and y (M,D)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :]
    sq -= 2.0 * (x @ y.T)
    # expansion can go slightly negative for near-coincident points
    np.maximum(sq, 0.0, out=sq)
    return sq


def knn(query, ref, k):
    """Indices and Euclidean distances of the k nearest rows of ref.

    Ties are broken toward the smaller reference index (stable sort).
    """
    d2 = pairwise_sqdist(query, ref)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order.astype(np.int64), dist


def sinkhorn_sweeps(a, row_target, col_target, iterations):
    """Alternating marginal normalization, in place.

    One iteration = column pass then row pass, so the run always ends on
    a row normalization. Zero-sum lines are left untouched; entries are
    assumed nonnegative.
    """
    for _ in range(iterations):
        cs = a.sum(axis=0)
        scale = np.ones_like(cs)
        np.divide(col_target, cs, out=scale, where=cs > 0.0)
        a *= scale[None, :]
        rs = a.sum(axis=1)
        scale = np.ones_like(rs)
        np.divide(row_target, rs, out=scale, where=rs > 0.0)
        a *= scale[:, None]
    return a
