"""Kernel backend selection.

The hot loops live twice: a Cython extension (diffreg.kernels._core) and
a numpy fallback with identical semantics. The extension is used when it
imported successfully; DIFFREG_PURE_PYTHON=1 forces the fallback. The
active choice is exposed as BACKEND ("compiled" or "numpy").
"""

import os

from . import fallback as _fallback

if os.environ.get("DIFFREG_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

pairwise_sqdist = _impl.pairwise_sqdist
knn = _impl.knn
sinkhorn_sweeps = _impl.sinkhorn_sweeps

__all__ = ["BACKEND", "pairwise_sqdist", "knn", "sinkhorn_sweeps"]
