"""Matching matrices on the transport polytope and the Sinkhorn projection.

A matching matrix for N source and M target points is an N x M array of
soft correspondence weights. The feasible set is the transport polytope
with uniform marginals: every row sums to 1/N, every column to 1/M, so
total mass is 1. Square matrices with a bijective ground truth make this
the doubly stochastic polytope up to the 1/N scale.

sinkhorn_project maps arbitrary nonnegative scores onto that set by
alternating marginal normalization, always ending on a row pass, so rows
are exact and columns carry the residual.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    EmptyGroundTruth,
    IOFormatError,
    NonFiniteInput,
    ShapeMismatch,
    UsageError,
    ZeroMassInput,
)

MATRIX_FORMAT_VERSION = 1


class MatchMatrix:
    """Immutable N x M matrix of finite correspondence scores."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        a = np.array(entries, dtype=np.float64, order="C")
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeMismatch(f"entries must be 2-D and nonempty, got {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteInput("matrix entries contain NaN or infinity")
        a.flags.writeable = False
        self.entries = a

    @property
    def n_rows(self):
        return self.entries.shape[0]

    @property
    def n_cols(self):
        return self.entries.shape[1]

    @property
    def shape(self):
        return self.entries.shape

    @property
    def row_marginal(self):
        """Target row sum on the polytope: 1/N of unit total mass."""
        return 1.0 / self.n_rows

    @property
    def col_marginal(self):
        return 1.0 / self.n_cols

    def total_mass(self):
        return float(self.entries.sum())

    def max_row_deviation(self):
        return float(np.abs(self.entries.sum(axis=1) - self.row_marginal).max())

    def max_col_deviation(self):
        return float(np.abs(self.entries.sum(axis=0) - self.col_marginal).max())

    def row_entropies(self):
        """Entropy of each row distribution (rows renormalized to sum 1)."""
        sums = self.entries.sum(axis=1, keepdims=True)
        safe = np.where(sums > 0.0, sums, 1.0)
        p = self.entries / safe
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0.0, np.log(p), 0.0)
        return -(p * logp).sum(axis=1) + 0.0

    def __repr__(self):
        return f"MatchMatrix(shape={self.entries.shape}, mass={self.total_mass():.6f})"


def _prepare_scores(entries, in_log_domain):
    """Nonnegative score array for the normalization sweeps.

    Log-domain input is exponentiated after subtracting the row max.
    Plain input is clamped at zero; an all-zero result is retried with
    the global minimum shifted out, and ZeroMassInput raised if the
    input was constant so no shift can create mass.
    """
    if in_log_domain:
        return np.exp(entries - entries.max(axis=1, keepdims=True))
    a = np.maximum(entries, 0.0)
    if a.sum() <= 0.0:
        a = entries - entries.min()
        if a.sum() <= 0.0:
            raise ZeroMassInput("all entries zero after clamping; no shift possible")
    return a


def project_array(entries, iterations, in_log_domain=False):
    """Array-in, array-out core of sinkhorn_project."""
    if iterations < 1:
        raise UsageError("iterations must be at least 1")
    a = _prepare_scores(np.asarray(entries, dtype=np.float64), in_log_domain)
    a = np.ascontiguousarray(a)
    n, m = a.shape
    kernels.sinkhorn_sweeps(a, 1.0 / n, 1.0 / m, iterations)
    return a


def sinkhorn_project(m, iterations=100, in_log_domain=False):
    """Project scores onto the uniform-marginal transport polytope.

    Entries are treated as nonnegative scores (exponentiated first when
    in_log_domain). After projection every row sums to 1/N within fp
    precision (rows are normalized last) and columns approach 1/M as
    iterations grow. Support is preserved: zero entries stay zero.
    """
    return MatchMatrix(project_array(m.entries, iterations, in_log_domain))


def ground_truth_matrix(pair, iterations=10):
    """Polytope matrix encoding a scene pair's true correspondences.

    Mass 1/|gt| sits on each ground-truth cell and zero elsewhere, then
    the matrix is projected. Projection only rescales rows and columns,
    so the support, and hence the per-row argmax, is exactly the pairing.
    """
    gt = np.asarray(pair.gt_pairs, dtype=np.int64)
    if gt.size == 0:
        raise EmptyGroundTruth("scene pair has no ground-truth correspondences")
    n, m = len(pair.source), len(pair.target)
    base = np.zeros((n, m))
    base[gt[:, 0], gt[:, 1]] = 1.0 / gt.shape[0]
    return MatchMatrix(project_array(base, iterations))


@dataclass(frozen=True)
class Correspondences:
    """Sparse predicted matches sorted by entry value descending."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        si = np.asarray(self.source_indices, dtype=np.int64)
        ti = np.asarray(self.target_indices, dtype=np.int64)
        cf = np.asarray(self.confidences, dtype=np.float64)
        if not (si.shape == ti.shape == cf.shape) or si.ndim != 1:
            raise ShapeMismatch("correspondence arrays must be 1-D and equal length")
        if cf.size and (not np.isfinite(cf).all() or cf.min() < 0.0):
            raise UsageError("confidences must be finite and nonnegative")
        for name, arr in (("source_indices", si), ("target_indices", ti), ("confidences", cf)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.source_indices.shape[0]

    def __iter__(self):
        """Yield (source_index, target_index, confidence) triples."""
        for si, ti, cf in zip(
            self.source_indices, self.target_indices, self.confidences
        ):
            yield int(si), int(ti), float(cf)


def extract_topk(m, k, mutual=False):
    """Top-k cells of a matching matrix as correspondences.

    Cells are ranked by entry value descending with ties broken by
    (row, column) ascending. With mutual=True only cells that are both
    their row's and their column's argmax are candidates, so fewer than
    k pairs may come back. Confidence is entry / row max, clipped to
    [0, 1], and 0 for an all-nonpositive row.
    """
    entries = m.entries
    n, mm = entries.shape
    if not 1 <= k <= n * mm:
        raise UsageError(f"k must be in [1, {n * mm}], got {k}")
    if mutual:
        row_arg = entries.argmax(axis=1)
        col_arg = entries.argmax(axis=0)
        rows = np.arange(n)
        keep = col_arg[row_arg] == rows
        cand_i = rows[keep]
        cand_j = row_arg[keep]
        values = entries[cand_i, cand_j]
    else:
        cand_i, cand_j = np.divmod(np.arange(n * mm), mm)
        values = entries.ravel()
    # stable sort on -value keeps flat (row-major) order for equal values,
    # which is exactly (row, column) ascending
    order = np.argsort(-values, kind="stable")[: min(k, values.size)]
    si, ti, vals = cand_i[order], cand_j[order], values[order]
    row_max = entries.max(axis=1)[si]
    with np.errstate(divide="ignore", invalid="ignore"):
        conf = np.where(row_max > 0.0, vals / row_max, 0.0)
    conf = np.clip(conf, 0.0, 1.0)
    return Correspondences(si, ti, conf)


# ---------------------------------------------------------------------------
# serialization

def save_matrix(path, m):
    """Dense binary layout: <u32 N> <u32 M> then N*M little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", m.n_rows, m.n_cols))
        fh.write(np.ascontiguousarray(m.entries, dtype="<f8").tobytes())


def load_matrix(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise IOFormatError(f"{path}: truncated matrix header")
    n, m = struct.unpack("<II", blob[:8])
    expected = 8 + n * m * 8
    if n < 1 or m < 1 or len(blob) != expected:
        raise IOFormatError(
            f"{path}: expected {expected} bytes for a {n}x{m} matrix, got {len(blob)}"
        )
    entries = np.frombuffer(blob, dtype="<f8", offset=8).reshape(n, m)
    return MatchMatrix(entries)


def matrix_to_json_dict(m):
    return {
        "format_version": MATRIX_FORMAT_VERSION,
        "n_rows": m.n_rows,
        "n_cols": m.n_cols,
        "entries": m.entries.tolist(),
    }


def save_matrix_json(path, m):
    with open(path, "w") as fh:
        json.dump(matrix_to_json_dict(m), fh, sort_keys=True)
        fh.write("\n")


def load_matrix_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    try:
        entries = np.array(doc["entries"], dtype=np.float64)
        if entries.shape != (doc["n_rows"], doc["n_cols"]):
            raise IOFormatError(f"{path}: entries do not match declared shape")
    except (KeyError, TypeError, ValueError) as exc:
        raise IOFormatError(f"{path}: malformed matrix JSON ({exc})") from exc
    return MatchMatrix(entries)
