"""diffreg: point-cloud registration by diffusion over matching matrices.

The state variable is a soft correspondence matrix on the transport
polytope with uniform marginals. A fixed forward process noises the
ground-truth matrix; reverse DDIM sampling denoises it with a
lightweight pipeline (Sinkhorn smoothing, soft Procrustes alignment,
warping, a feature network, matching logits, Sinkhorn), and the rigid
pose falls out of the final matrix in closed form. Subpackages:

    kernels     numeric primitives (compiled extension or numpy fallback)
    geometry    clouds, rigid transforms, weighted Procrustes, flow tools
    matrixspace matching matrices, Sinkhorn projection, serialization
    diffusion   noise schedules, forward process, reverse DDIM sampler
    denoiser    the denoising pipeline and its feature networks
    bench       synthetic scenes, metrics, experiment harness
    cli         command-line front end (diffreg ...)
"""

from . import bench, denoiser, diffusion, errors, geometry, matrixspace, pointcloud_io
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "__version__",
    "bench",
    "denoiser",
    "diffusion",
    "errors",
    "geometry",
    "matrixspace",
    "pointcloud_io",
]
