"""Sinusoidal 3-D positional encoding used for elementwise modulation.

Each coordinate axis contributes sin and cos at geometrically spaced
frequencies (pi * 2^b). A full band is 6 values wide, so the encoding
uses ceil(dim / 6) bands and truncates to the requested width; output
values lie in [-1, 1] and identical points encode identically.
"""

import math

import numpy as np

from ..errors import UsageError


def sinusoidal_encoding(points, dim, n_frequencies=None):
    """Encode (N, 3) positions into an (N, dim) modulation table."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise UsageError(f"points must be (N, 3), got {pts.shape}")
    if dim < 1:
        raise UsageError("encoding dim must be at least 1")
    bands = n_frequencies if n_frequencies is not None else math.ceil(dim / 6)
    if bands * 6 < dim:
        raise UsageError(f"{bands} bands cover only {bands * 6} dims, need {dim}")
    freqs = math.pi * (2.0 ** np.arange(bands))
    phases = pts[:, None, :] * freqs[None, :, None]  # (N, bands, 3)
    blocks = np.concatenate([np.sin(phases), np.cos(phases)], axis=2)  # (N, bands, 6)
    return blocks.reshape(pts.shape[0], bands * 6)[:, :dim]
