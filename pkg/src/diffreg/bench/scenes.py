"""Synthetic registration scenes with exact ground truth.

A scene is built from one structured base cloud (a mixture of planes,
spheres, and blob clusters). Source and target take overlapping windows
of it along a random direction, so the requested overlap fraction is
realized exactly by construction; the target side is then moved by a
random rigid transform, optionally deformed by a smooth low-frequency
field, and perturbed with clipped Gaussian noise. Everything downstream
(pairing, rigid pose, dense flow, overlap mask) is recorded exactly.

All randomness flows through one generator seeded from the spec, so a
spec is a complete, bitwise-reproducible description of its scene.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import (
    BundleFormatError,
    InfeasibleOverlap,
    LengthMismatch,
    ShapeMismatch,
    UsageError,
)
from ..geometry import (
    FlowField,
    PointCloud,
    RigidTransform,
    cloud_diameter,
    knn,
    random_rotation,
)
from ..pointcloud_io import read_ply, write_ply

BUNDLE_FORMAT_VERSION = 1

_MODES = ("rigid", "deformable")
_DESCRIPTOR_KINDS = ("oracle", "local", "none")


@dataclass(frozen=True)
class GeneratorSpec:
    """Complete recipe for one synthetic scene.

    noise_sigma and deformation_amplitude are absolute lengths in the
    normalized frame where the source cloud has diameter 2. Extra knobs
    beyond the core recipe: descriptor_dim and descriptor_noise shape
    the oracle descriptors, translation_scale scales the random
    translation box, force_identity_transform pins the motion (and the
    target ordering) for debugging, and shuffle_target hides the
    construction order from consumers.
    """

    n_points: int = 128
    overlap_fraction: float = 1.0
    noise_sigma: float = 0.0
    mode: str = "rigid"
    deformation_amplitude: float = 0.0
    descriptor_kind: str = "oracle"
    seed: int = 0
    descriptor_dim: int = 16
    descriptor_noise: float = 0.2
    translation_scale: float = 1.0
    force_identity_transform: bool = False
    shuffle_target: bool = True

    def __post_init__(self):
        if self.n_points < 8:
            raise UsageError("n_points must be at least 8")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise UsageError("overlap_fraction must lie in (0, 1]")
        if self.noise_sigma < 0.0 or self.deformation_amplitude < 0.0:
            raise UsageError("noise_sigma and deformation_amplitude must be >= 0")
        if self.mode not in _MODES:
            raise UsageError(f"mode must be one of {_MODES}")
        if self.descriptor_kind not in _DESCRIPTOR_KINDS:
            raise UsageError(f"descriptor_kind must be one of {_DESCRIPTOR_KINDS}")
        if self.descriptor_dim < 2:
            raise UsageError("descriptor_dim must be at least 2")
        if self.descriptor_noise < 0.0:
            raise UsageError("descriptor_noise must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ScenePair:
    """A source/target cloud pair with full ground truth.

    gt_transform is the rigid motion; gt_flow holds every source
    point's total ground-truth displacement (rigid plus deformation,
    before target noise), so it is populated in both modes. gt_pairs
    lists (source index, target index) for the shared points and
    overlap_mask_source flags the source rows that have a partner.
    """

    source: PointCloud
    target: PointCloud
    gt_transform: RigidTransform
    gt_flow: FlowField
    gt_pairs: np.ndarray
    overlap_mask_source: np.ndarray
    scene_diameter: float
    seed: int
    mode: str = "rigid"

    def __post_init__(self):
        pairs = np.array(self.gt_pairs, dtype=np.int64)
        pairs = pairs.reshape(-1, 2) if pairs.size else pairs.reshape(0, 2)
        n, m = len(self.source), len(self.target)
        if pairs.size and (
            pairs.min() < 0 or pairs[:, 0].max() >= n or pairs[:, 1].max() >= m
        ):
            raise UsageError("gt_pairs indices out of range")
        pairs.flags.writeable = False
        object.__setattr__(self, "gt_pairs", pairs)
        mask = np.array(self.overlap_mask_source, dtype=bool)
        if mask.shape != (n,):
            raise ShapeMismatch("overlap mask must have one flag per source point")
        mask.flags.writeable = False
        object.__setattr__(self, "overlap_mask_source", mask)
        if len(self.gt_flow) != n:
            raise LengthMismatch("gt_flow must have one vector per source point")
        if not self.scene_diameter > 0.0:
            raise UsageError("scene_diameter must be positive")
        if self.mode not in _MODES:
            raise UsageError(f"mode must be one of {_MODES}")


def warp_gt(pair):
    """Ground-truth warp of every source point (before target noise)."""
    if pair.mode == "rigid":
        return pair.gt_transform.apply(pair.source.points)
    return pair.source.points + pair.gt_flow.vectors


def _base_cloud(count, rng):
    """Structured positions: a plane, a sphere shell, and blob clusters."""
    n_plane = int(round(0.4 * count))
    n_sphere = int(round(0.3 * count))
    n_cluster = count - n_plane - n_sphere
    parts = []

    basis = random_rotation(rng)
    offset = rng.uniform(-0.3, 0.3, 3)
    ab = rng.uniform(-1.0, 1.0, (n_plane, 2))
    thickness = 0.02 * rng.standard_normal(n_plane)
    parts.append(
        offset
        + ab[:, :1] * basis[:, 0]
        + ab[:, 1:] * basis[:, 1]
        + thickness[:, None] * basis[:, 2]
    )

    center = rng.uniform(-0.5, 0.5, 3)
    radius = rng.uniform(0.4, 0.9)
    dirs = rng.standard_normal((n_sphere, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    parts.append(center + radius * dirs)

    centers = rng.uniform(-1.0, 1.0, (4, 3))
    assign = rng.integers(0, 4, n_cluster)
    parts.append(centers[assign] + 0.12 * rng.standard_normal((n_cluster, 3)))

    return np.vstack(parts)


def _harmonic_field(rng, n_harmonics=4):
    """Smooth displacement field as a sum of low-frequency sinusoids."""
    freqs = rng.normal(0.0, 1.2, (n_harmonics, 3))
    phases = rng.uniform(0.0, 2.0 * math.pi, (n_harmonics, 3))
    amps = rng.standard_normal((n_harmonics, 3))

    def field_fn(points):
        out = np.zeros_like(points)
        for h in range(n_harmonics):
            arg = points @ freqs[h]
            out += amps[h] * np.sin(arg[:, None] + phases[h][None, :])
        return out

    return field_fn


def _clip_noise(noise, sigma):
    """Cap each row's norm at 3 sigma so residuals keep the gt invariant."""
    if sigma <= 0.0:
        return np.zeros_like(noise)
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    cap = 3.0 * sigma
    factor = np.where(norms > cap, cap / np.where(norms > 0.0, norms, 1.0), 1.0)
    return noise * factor


def _unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _corrupt_descriptors(desc, noise, rng):
    out = desc + noise * _unit_rows(rng, desc.shape)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def local_statistics_descriptors(points, scene_diameter, neighbors=9):
    """7-dim geometric descriptor: normal, covariance shares, local scale.

    Per point, the covariance of its k nearest neighbors (self included)
    yields the smallest eigenvector as a sign-canonicalized normal
    estimate (3), the eigenvalue fractions (3), and the total spread
    relative to the scene diameter (1). Weak on purpose; it exists so
    networks have a descriptor that is computable from geometry alone.
    """
    n = points.shape[0]
    k = min(neighbors, n)
    idx = knn(points, points, k)
    desc = np.zeros((n, 7))
    for i in range(n):
        nb = points[idx[i]]
        centered = nb - nb.mean(axis=0)
        cov = centered.T @ centered / k
        w, v = np.linalg.eigh(cov)
        w = np.maximum(w, 0.0)
        total = w.sum()
        normal = v[:, 0]
        if normal[np.argmax(np.abs(normal))] < 0.0:
            normal = -normal
        desc[i, :3] = normal
        if total > 1e-30:
            desc[i, 3:6] = w / total
            desc[i, 6] = math.sqrt(total) / scene_diameter
    return desc


def generate_scene(spec):
    """Build the ScenePair a GeneratorSpec describes.

    Raises InfeasibleOverlap when no integer number of shared points
    lands within 5% of the requested fraction.
    """
    if not isinstance(spec, GeneratorSpec):
        spec = GeneratorSpec.from_dict(dict(spec))
    n = spec.n_points
    shared = int(round(spec.overlap_fraction * n))
    if shared < 1 or abs(shared / n - spec.overlap_fraction) > 0.05 + 1e-12:
        raise InfeasibleOverlap(
            f"overlap {spec.overlap_fraction} not realizable within 5% at n={n}"
        )
    rng = np.random.default_rng(spec.seed)

    base = _base_cloud(2 * n - shared, rng)
    direction = random_rotation(rng)[:, 0]
    order = np.argsort(base @ direction, kind="stable")
    src_idx = order[:n]
    tgt_idx = order[n - shared :]

    src_pts = base[src_idx]
    center = src_pts.mean(axis=0)
    scale = 2.0 / cloud_diameter(src_pts)
    src_pts = (src_pts - center) * scale
    tgt_base = (base[tgt_idx] - center) * scale
    diameter = cloud_diameter(src_pts)

    if spec.force_identity_transform:
        transform = RigidTransform.identity()
    else:
        transform = RigidTransform(
            random_rotation(rng), rng.uniform(-0.5, 0.5, 3) * spec.translation_scale
        )

    if spec.mode == "deformable" and spec.deformation_amplitude > 0.0:
        field_fn = _harmonic_field(rng)
        raw_tgt = field_fn(tgt_base)
        rms = math.sqrt(float((raw_tgt**2).sum(axis=1).mean()))
        gain = spec.deformation_amplitude / rms if rms > 0.0 else 0.0
        disp_tgt = gain * raw_tgt
        disp_src = gain * field_fn(src_pts)
    else:
        disp_tgt = np.zeros_like(tgt_base)
        disp_src = np.zeros_like(src_pts)

    tgt_clean = transform.apply(tgt_base) + disp_tgt
    noise = _clip_noise(
        rng.standard_normal(tgt_clean.shape) * spec.noise_sigma, spec.noise_sigma
    )
    tgt_pts = tgt_clean + noise
    flow = (transform.apply(src_pts) + disp_src) - src_pts

    # source row i sits at sorted position i; rows n-shared.. are shared
    mask = np.arange(n) >= n - shared
    src_gt = np.arange(n - shared, n, dtype=np.int64)
    tgt_gt = np.arange(shared, dtype=np.int64)

    if spec.shuffle_target and not spec.force_identity_transform:
        perm = rng.permutation(n)
        inverse = np.empty(n, dtype=np.int64)
        inverse[perm] = np.arange(n)
        tgt_pts = tgt_pts[perm]
        tgt_gt = inverse[tgt_gt]
    else:
        perm = np.arange(n)

    src_desc = tgt_desc = None
    if spec.descriptor_kind == "oracle":
        base_desc = _unit_rows(rng, (base.shape[0], spec.descriptor_dim))
        src_desc = _corrupt_descriptors(base_desc[src_idx], spec.descriptor_noise, rng)
        tgt_desc = _corrupt_descriptors(base_desc[tgt_idx], spec.descriptor_noise, rng)
        tgt_desc = tgt_desc[perm]
    elif spec.descriptor_kind == "local":
        src_desc = local_statistics_descriptors(src_pts, diameter)
        tgt_desc = local_statistics_descriptors(tgt_pts, diameter)

    return ScenePair(
        source=PointCloud(src_pts, src_desc),
        target=PointCloud(tgt_pts, tgt_desc),
        gt_transform=transform,
        gt_flow=FlowField(flow),
        gt_pairs=np.stack([src_gt, tgt_gt], axis=1),
        overlap_mask_source=mask,
        scene_diameter=float(diameter),
        seed=spec.seed,
        mode=spec.mode,
    )


# ---------------------------------------------------------------------------
# scene bundles on disk: source.ply + target.ply + gt.json

def save_bundle(dirpath, pair):
    """Write a scene to a directory; round-trips bitwise via load_bundle."""
    os.makedirs(dirpath, exist_ok=True)
    write_ply(os.path.join(dirpath, "source.ply"), pair.source)
    write_ply(os.path.join(dirpath, "target.ply"), pair.target)
    gt = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "mode": pair.mode,
        "seed": pair.seed,
        "scene_diameter": pair.scene_diameter,
        "rotation": pair.gt_transform.rotation.tolist(),
        "translation": pair.gt_transform.translation.tolist(),
        "flow": pair.gt_flow.vectors.tolist(),
        "gt_pairs": pair.gt_pairs.tolist(),
        "overlap_mask_source": pair.overlap_mask_source.astype(int).tolist(),
    }
    with open(os.path.join(dirpath, "gt.json"), "w") as fh:
        json.dump(gt, fh, sort_keys=True)
        fh.write("\n")


def load_bundle(dirpath):
    """Read a scene bundle written by save_bundle."""
    for name in ("source.ply", "target.ply", "gt.json"):
        if not os.path.exists(os.path.join(dirpath, name)):
            raise BundleFormatError(f"{dirpath}: missing {name}")
    source = read_ply(os.path.join(dirpath, "source.ply"))
    target = read_ply(os.path.join(dirpath, "target.ply"))
    with open(os.path.join(dirpath, "gt.json")) as fh:
        try:
            gt = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BundleFormatError(f"{dirpath}: gt.json is not valid JSON") from exc
    if gt.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise BundleFormatError(
            f"{dirpath}: unsupported bundle version {gt.get('format_version')!r}"
        )
    try:
        return ScenePair(
            source=source,
            target=target,
            gt_transform=RigidTransform(
                np.array(gt["rotation"]), np.array(gt["translation"])
            ),
            gt_flow=FlowField(np.array(gt["flow"])),
            gt_pairs=np.array(gt["gt_pairs"], dtype=np.int64),
            overlap_mask_source=np.array(gt["overlap_mask_source"], dtype=bool),
            scene_diameter=float(gt["scene_diameter"]),
            seed=int(gt["seed"]),
            mode=str(gt["mode"]),
        )
    except (KeyError, TypeError, ValueError, UsageError) as exc:
        raise BundleFormatError(f"{dirpath}: inconsistent bundle ({exc})") from exc
