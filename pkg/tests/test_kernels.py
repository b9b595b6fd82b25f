"""Numeric kernel primitives: numpy fallback vs compiled extension."""

import numpy as np
import pytest

from diffreg import kernels
from diffreg.kernels import fallback


def _maybe_core():
    try:
        from diffreg.kernels import _core
    except ImportError:
        return None
    return _core


def test_pairwise_sqdist_matches_naive_loop(rng):
    x = rng.standard_normal((17, 3))
    y = rng.standard_normal((11, 3))
    got = kernels.pairwise_sqdist(x, y)
    want = np.empty((17, 11))
    for i in range(17):
        for j in range(11):
            want[i, j] = ((x[i] - y[j]) ** 2).sum()
    assert np.allclose(got, want, atol=1e-12)


def test_pairwise_sqdist_nonnegative_for_coincident_points(rng):
    x = rng.standard_normal((8, 3)) * 1e3
    d = kernels.pairwise_sqdist(x, x.copy())
    assert (d >= 0.0).all()
    assert np.allclose(np.diag(d), 0.0, atol=1e-6)


def test_knn_orders_by_distance_ascending(rng):
    q = rng.standard_normal((9, 3))
    r = rng.standard_normal((30, 3))
    idx, dist = kernels.knn(q, r, 5)
    assert idx.shape == dist.shape == (9, 5)
    assert (np.diff(dist, axis=1) >= 0.0).all()


def test_knn_breaks_ties_toward_smaller_index():
    # reference points 1 and 3 are the same distance from the query
    q = np.zeros((1, 3))
    r = np.array(
        [
            [5.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        ]
    )
    idx, dist = kernels.knn(q, r, 3)
    assert idx[0].tolist() == [1, 3, 2]
    assert dist[0, 0] == dist[0, 1] == 1.0


def test_sinkhorn_sweeps_ends_on_row_normalization(rng):
    a = rng.random((6, 9)) + 0.1
    out = kernels.sinkhorn_sweeps(a.copy(), 1.0 / 6.0, 1.0 / 9.0, 7)
    # the final pass normalizes rows, so row sums are exact to fp error
    assert np.abs(out.sum(axis=1) - 1.0 / 6.0).max() < 1e-15
    # columns were normalized one half-step earlier: approximate only
    assert np.abs(out.sum(axis=0) - 1.0 / 9.0).max() < 1e-2


def test_sinkhorn_sweeps_skips_zero_lines(rng):
    a = rng.random((5, 5)) + 0.1
    a[2, :] = 0.0
    a[:, 3] = 0.0
    out = kernels.sinkhorn_sweeps(a.copy(), 0.2, 0.2, 10)
    assert np.isfinite(out).all()
    assert (out[2, :] == 0.0).all()
    assert (out[:, 3] == 0.0).all()


@pytest.mark.skipif(_maybe_core() is None, reason="compiled extension not built")
def test_backends_agree(rng):
    core = _maybe_core()
    x = rng.standard_normal((23, 3))
    y = rng.standard_normal((31, 3))
    assert np.allclose(
        core.pairwise_sqdist(x, y), fallback.pairwise_sqdist(x, y), atol=1e-12
    )
    ic, dc = core.knn(x, y, 4)
    if_, df = fallback.knn(x, y, 4)
    assert np.array_equal(ic, if_)
    assert np.allclose(dc, df, atol=1e-12)
    a = rng.random((16, 12)) + 0.05
    oc = core.sinkhorn_sweeps(a.copy(), 1 / 16, 1 / 12, 10)
    of = fallback.sinkhorn_sweeps(a.copy(), 1 / 16, 1 / 12, 10)
    assert np.allclose(oc, of, atol=1e-12)


@pytest.mark.skipif(_maybe_core() is None, reason="compiled extension not built")
def test_backend_tie_handling_agrees():
    core = _maybe_core()
    q = np.zeros((1, 3))
    r = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0], [0.5, 0, 0]])
    ic, _ = core.knn(q, r, 4)
    if_, _ = fallback.knn(q, r, 4)
    assert np.array_equal(ic, if_)
