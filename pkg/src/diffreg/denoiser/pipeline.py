"""The lightweight denoising pass shared by every denoiser.

Given a noisy matching matrix and a scene pair it predicts the clean
matrix in five moves:

  1. smooth the state onto the polytope (Sinkhorn)
  2. fit a rigid transform from the smoothed weights (soft Procrustes)
  3. warp the source cloud by that transform
  4. run the feature network on warped source and target
  5. score feature pairs and Sinkhorn the scores into a matrix

Positions therefore influence the prediction only through the single
rigid alignment; the feature network never sees the raw noisy matrix.
"""

import logging

import numpy as np

from ..errors import DegenerateConfiguration, MissingDescriptors
from ..geometry import RigidTransform, kabsch_from_dense_weights, warp_rigid
from ..matrixspace import MatchMatrix, extract_topk, project_array
from .positional import sinusoidal_encoding

log = logging.getLogger("diffreg.denoiser")


def soft_procrustes(weights, pair, mode="all", topk=128):
    """Rigid fit from soft correspondence weights.

    mode "all" weighs every (i, j) cell; "topk" keeps only the topk
    largest cells. A degenerate weight configuration falls back to the
    identity transform rather than failing the whole denoising pass.
    """
    try:
        if mode == "all":
            return kabsch_from_dense_weights(
                pair.source.points, pair.target.points, weights.entries
            )
        if mode != "topk":
            raise ValueError(f"unknown procrustes mode {mode!r}")
        sel = extract_topk(weights, min(topk, weights.entries.size))
        sparse = np.zeros_like(weights.entries)
        sparse[sel.source_indices, sel.target_indices] = weights.entries[
            sel.source_indices, sel.target_indices
        ]
        return kabsch_from_dense_weights(pair.source.points, pair.target.points, sparse)
    except DegenerateConfiguration as exc:
        log.debug("soft procrustes degenerate (%s); using identity transform", exc)
        return RigidTransform.identity()


def predict_target_matrix(noisy, pair, feature_net, sinkhorn_iterations=10,
                          procrustes_mode="all", procrustes_topk=128):
    """Predict the clean matching matrix from a noisy state."""
    if pair.source.descriptors is None or pair.target.descriptors is None:
        raise MissingDescriptors("feature networks need descriptors on both clouds")
    smoothed = MatchMatrix(project_array(noisy.entries, sinkhorn_iterations))
    transform = soft_procrustes(smoothed, pair, procrustes_mode, procrustes_topk)
    warped = warp_rigid(pair.source, transform)
    enc_dim = feature_net.encoding_dim
    src_enc = tgt_enc = None
    if enc_dim is not None:
        src_enc = sinusoidal_encoding(warped.points, enc_dim)
        tgt_enc = sinusoidal_encoding(pair.target.points, enc_dim)
    logits = feature_net.logits(
        warped.points,
        pair.target.points,
        pair.source.descriptors,
        pair.target.descriptors,
        src_enc,
        tgt_enc,
    )
    return MatchMatrix(
        project_array(
            logits, sinkhorn_iterations, in_log_domain=feature_net.logit_domain == "log"
        )
    )
