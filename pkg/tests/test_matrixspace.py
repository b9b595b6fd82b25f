"""Matching matrices and Sinkhorn projection onto uniform marginals."""

import numpy as np
import pytest

from conftest import make_pair
from diffreg.errors import (
    EmptyGroundTruth,
    IOFormatError,
    NonFiniteInput,
    ZeroMassInput,
)
from diffreg.matrixspace import (
    Correspondences,
    MatchMatrix,
    extract_topk,
    ground_truth_matrix,
    load_matrix,
    load_matrix_json,
    project_array,
    save_matrix,
    save_matrix_json,
    sinkhorn_project,
)


def _oracle_project(entries, iterations=1000):
    """Independent alternating-normalization oracle (column then row)."""
    a = np.array(entries, dtype=np.float64)
    n, m = a.shape
    for _ in range(iterations):
        cs = a.sum(axis=0)
        a = a * np.where(cs > 0, (1.0 / m) / np.where(cs > 0, cs, 1.0), 1.0)
        rs = a.sum(axis=1)
        a = a * np.where(rs > 0, (1.0 / n) / np.where(rs > 0, rs, 1.0), 1.0)[:, None]
    return a


# ------------------------------------------------------------ sinkhorn_project


def test_uniform_matrix_is_a_fixed_point():
    m = MatchMatrix(np.full((2, 2), 0.25))
    out = sinkhorn_project(m, iterations=10)
    assert np.abs(out.entries - 0.25).max() < 1e-12


def test_symmetric_matrix_matches_long_run_oracle():
    m = MatchMatrix(np.array([[4.0, 1.0], [1.0, 4.0]]))
    out = sinkhorn_project(m, iterations=100)
    want = _oracle_project([[4.0, 1.0], [1.0, 4.0]])
    assert np.abs(out.entries - want).max() < 1e-8


def test_dominant_diagonal_converges_to_scaled_permutation(rng):
    n = 4
    base = rng.random((n, n)) * 1e-6 + 1e-6
    perm = rng.permutation(n)
    for i in range(n):
        base[i, perm[i]] = 1.0
    out = sinkhorn_project(MatchMatrix(base), iterations=100)
    want = np.zeros((n, n))
    want[np.arange(n), perm] = 1.0 / n
    assert np.abs(out.entries - want).max() < 1e-3


def test_projection_satisfies_marginals_and_is_idempotent(rng):
    a = rng.random((12, 9)) + 0.01
    out = sinkhorn_project(MatchMatrix(a), iterations=100)
    assert out.max_row_deviation() < 1e-6
    assert out.max_col_deviation() < 1e-4
    again = sinkhorn_project(out, iterations=100)
    assert np.abs(again.entries - out.entries).max() < 1e-8


def test_projection_preserves_unit_mass(rng):
    a = rng.random((8, 11)) + 0.05
    out = sinkhorn_project(MatchMatrix(a), iterations=50)
    assert abs(out.total_mass() - 1.0) < 1e-9


def test_projection_is_permutation_equivariant(rng):
    a = rng.random((6, 7)) + 0.1
    p = rng.permutation(6)
    q = rng.permutation(7)
    direct = sinkhorn_project(MatchMatrix(a[p][:, q]), iterations=60).entries
    permuted = sinkhorn_project(MatchMatrix(a), iterations=60).entries[p][:, q]
    assert np.abs(direct - permuted).max() < 1e-10


def test_square_positive_matrix_converges_to_uniform_marginals(rng):
    a = rng.random((16, 16)) + 0.01
    out = sinkhorn_project(MatchMatrix(a), iterations=100)
    assert np.abs(out.entries.sum(axis=1) - 1.0 / 16).max() < 1e-6
    assert np.abs(out.entries.sum(axis=0) - 1.0 / 16).max() < 1e-4


def test_log_domain_projection_matches_plain_on_exp(rng):
    logits = rng.standard_normal((5, 8))
    log_out = project_array(logits, 40, in_log_domain=True)
    # same scores normalized by hand: plain projection of exp(logits)
    plain_out = project_array(np.exp(logits - logits.max()), 40)
    assert np.abs(log_out - plain_out).max() < 1e-9


def test_negative_entries_are_clamped_then_shifted(rng):
    # all-negative but non-constant input: the shift recovers usable scores
    a = -rng.random((4, 4)) - 1.0
    out = sinkhorn_project(MatchMatrix(a), iterations=50)
    assert abs(out.total_mass() - 1.0) < 1e-9
    assert (out.entries >= 0.0).all()


def test_constant_input_raises_zero_mass():
    with pytest.raises(ZeroMassInput):
        sinkhorn_project(MatchMatrix(np.zeros((3, 3))), iterations=5)
    with pytest.raises(ZeroMassInput):
        sinkhorn_project(MatchMatrix(np.full((3, 3), -2.0)), iterations=5)


def test_nonfinite_entries_rejected():
    a = np.ones((3, 3))
    a[1, 1] = np.nan
    with pytest.raises(NonFiniteInput):
        MatchMatrix(a)


def test_row_entropies_are_nonnegative_zero_for_onehot():
    m = MatchMatrix(np.eye(4) / 4.0)
    ent = m.row_entropies()
    assert (ent == 0.0).all()
    # no negative zero leaking into reports
    assert all(np.copysign(1.0, e) > 0 for e in ent)


# --------------------------------------------------------- ground_truth_matrix


def test_ground_truth_identity_pairing_is_fixed_point():
    pair = make_pair(n_points=8, overlap=1.0, seed=3, force_identity_transform=True)
    m = ground_truth_matrix(pair, iterations=10)
    n = len(pair.source)
    want = np.zeros((n, n))
    want[pair.gt_pairs[:, 0], pair.gt_pairs[:, 1]] = 1.0 / len(pair.gt_pairs)
    assert np.abs(m.entries - want).max() < 1e-9


def test_ground_truth_support_is_exactly_the_pair_set():
    pair = make_pair(n_points=16, overlap=0.5, seed=5)
    m = ground_truth_matrix(pair)
    nonzero = np.argwhere(m.entries > 0)
    got = {(int(i), int(j)) for i, j in nonzero}
    want = {(int(i), int(j)) for i, j in pair.gt_pairs}
    assert got == want


def test_ground_truth_row_argmax_reproduces_bijection():
    pair = make_pair(n_points=16, overlap=1.0, seed=11)
    m = ground_truth_matrix(pair)
    argmax = m.entries.argmax(axis=1)
    mapping = dict((int(i), int(j)) for i, j in pair.gt_pairs)
    for i in range(16):
        assert argmax[i] == mapping[i]


def test_ground_truth_requires_pairs():
    pair = make_pair(n_points=8, seed=1)
    stripped = type(pair)(
        source=pair.source,
        target=pair.target,
        gt_transform=pair.gt_transform,
        gt_flow=pair.gt_flow,
        gt_pairs=np.zeros((0, 2), dtype=np.int64),
        overlap_mask_source=pair.overlap_mask_source,
        scene_diameter=pair.scene_diameter,
        seed=pair.seed,
        mode=pair.mode,
    )
    with pytest.raises(EmptyGroundTruth):
        ground_truth_matrix(stripped)


# ---------------------------------------------------------------- extract_topk


def test_extract_topk_scaled_identity_mutual():
    n = 6
    m = MatchMatrix(np.eye(n) / n)
    pred = extract_topk(m, n, mutual=True)
    assert len(pred) == n
    assert np.array_equal(pred.source_indices, np.arange(n))
    assert np.array_equal(pred.target_indices, np.arange(n))
    assert np.allclose(pred.confidences, 1.0)


def test_extract_topk_k1_is_global_argmax(rng):
    a = rng.random((7, 9))
    m = MatchMatrix(a)
    pred = extract_topk(m, 1)
    i, j = np.unravel_index(a.argmax(), a.shape)
    assert (pred.source_indices[0], pred.target_indices[0]) == (i, j)


def test_extract_topk_matches_full_sort_oracle(rng):
    a = rng.random((8, 8))
    m = MatchMatrix(a)
    pred = extract_topk(m, 8, mutual=False)
    flat = [(-a[i, j], i, j) for i in range(8) for j in range(8)]
    flat.sort()
    want = [(i, j) for _, i, j in flat[:8]]
    got = list(zip(pred.source_indices.tolist(), pred.target_indices.tolist()))
    assert got == want


def test_extract_topk_returns_exactly_k_nonincreasing(rng):
    a = rng.random((10, 12))
    m = MatchMatrix(a)
    for k in (1, 5, 17):
        pred = extract_topk(m, k, mutual=False)
        assert len(pred) == k
        vals = a[pred.source_indices, pred.target_indices]
        assert (np.diff(vals) <= 1e-15).all()


def test_extract_topk_breaks_ties_by_row_then_column():
    a = np.zeros((3, 3))
    a[2, 1] = 1.0
    a[0, 2] = 1.0
    a[1, 0] = 1.0
    pred = extract_topk(MatchMatrix(a), 3, mutual=False)
    got = list(zip(pred.source_indices.tolist(), pred.target_indices.tolist()))
    assert got == [(0, 2), (1, 0), (2, 1)]


def test_correspondences_iterate_as_triples():
    pred = Correspondences(
        np.array([0, 2]), np.array([1, 0]), np.array([1.0, 0.5])
    )
    assert list(pred) == [(0, 1, 1.0), (2, 0, 0.5)]


# --------------------------------------------------------------- serialization


def test_binary_roundtrip_and_layout(tmp_path, rng):
    import struct

    m = MatchMatrix(rng.random((3, 5)))
    path = tmp_path / "m.bin"
    save_matrix(path, m)
    blob = path.read_bytes()
    n, cols = struct.unpack("<II", blob[:8])
    assert (n, cols) == (3, 5)
    vals = np.frombuffer(blob, dtype="<f8", offset=8).reshape(3, 5)
    assert np.array_equal(vals, m.entries)
    back = load_matrix(path)
    assert np.array_equal(back.entries, m.entries)


def test_binary_load_rejects_truncation(tmp_path, rng):
    m = MatchMatrix(rng.random((4, 4)))
    path = tmp_path / "m.bin"
    save_matrix(path, m)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(IOFormatError):
        load_matrix(path)


def test_json_roundtrip(tmp_path, rng):
    m = MatchMatrix(rng.random((4, 6)))
    path = tmp_path / "m.json"
    save_matrix_json(path, m)
    back = load_matrix_json(path)
    assert np.array_equal(back.entries, m.entries)


def test_json_load_rejects_malformed(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"n_rows": 2}\n')
    with pytest.raises(IOFormatError):
        load_matrix_json(path)
