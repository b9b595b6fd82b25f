"""Diffusion over matching matrices: schedules, forward noising, reverse DDIM.

The forward process interpolates a clean polytope matrix toward shaped
noise, then maps the result back onto the polytope:

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * shape(noise)
    output = sinkhorn(project_mode(x_t))

Rigid mode folds the Gaussian draw into a bounded band and projects by
subtracting the global minimum; deformable mode keeps the raw draw and
squashes through a sigmoid. Reverse sampling runs the deterministic (or
eta-interpolated) DDIM update, re-projecting after every step so each
intermediate state is a valid matching matrix.

Timestep conventions: t runs 1..T for transitions; abar_0 = 1 so t = 0
denotes the clean end of the chain and is accepted wherever the formulas
degrade gracefully to it.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateAlphaBar,
    IOFormatError,
    NonFiniteNoise,
    ShapeMismatch,
    TimestepOrder,
    TimestepOutOfRange,
    UsageError,
)
from .matrixspace import MatchMatrix, load_matrix, project_array, save_matrix

TRAJECTORY_FORMAT_VERSION = 1

# fold amplitude for rigid-mode noise shaping
DEFAULT_NOISE_FOLD = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors alpha_t and their cumulative products.

    Arrays are indexed by timestep with a sentinel at 0: alpha_bars[0] is
    exactly 1, alphas[0] is unused. Invariants: 0 < alpha_t < 1 for every
    t in 1..T and alpha_bars strictly decreasing.
    """

    kind: str
    timesteps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        t_count = self.timesteps
        if t_count < 1:
            raise UsageError("schedule needs at least one timestep")
        if a.shape != (t_count + 1,) or ab.shape != (t_count + 1,):
            raise ShapeMismatch("schedule arrays must have length T + 1")
        if ab[0] != 1.0:
            raise UsageError("alpha_bar at t=0 must be exactly 1")
        body = a[1:]
        if not ((body > 0.0).all() and (body < 1.0).all()):
            raise UsageError("alphas must lie strictly inside (0, 1)")
        if not (np.diff(ab) < 0.0).all():
            raise UsageError("alpha_bar must decrease strictly")
        for arr in (a, ab):
            arr.flags.writeable = False
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", ab)

    @classmethod
    def cosine(cls, timesteps=1000, offset=0.008, min_alpha=0.001):
        """Squared-cosine cumulative schedule with a floor on alpha_t."""
        t = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos((t / timesteps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        raw_bars = f / f[0]
        alphas = np.empty(timesteps + 1)
        alphas[0] = 1.0
        alphas[1:] = np.clip(raw_bars[1:] / raw_bars[:-1], min_alpha, None)
        if alphas[1:].max() >= 1.0:
            raise UsageError("cosine schedule collapsed; timesteps too large")
        bars = np.empty(timesteps + 1)
        bars[0] = 1.0
        bars[1:] = np.cumprod(alphas[1:])
        return cls("cosine", timesteps, alphas, bars)

    @classmethod
    def linear_beta(cls, timesteps=1000, beta_start=1e-4, beta_end=0.02):
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise UsageError("betas must satisfy 0 < start <= end < 1")
        betas = np.linspace(beta_start, beta_end, timesteps)
        alphas = np.concatenate([[1.0], 1.0 - betas])
        bars = np.empty(timesteps + 1)
        bars[0] = 1.0
        bars[1:] = np.cumprod(alphas[1:])
        return cls("linear-beta", timesteps, alphas, bars)

    def alpha(self, t):
        if not 1 <= t <= self.timesteps:
            raise TimestepOutOfRange(f"t={t} outside 1..{self.timesteps}")
        return float(self.alphas[t])

    def alpha_bar(self, t):
        if not 0 <= t <= self.timesteps:
            raise TimestepOutOfRange(f"t={t} outside 0..{self.timesteps}")
        return float(self.alpha_bars[t])

    def to_dict(self):
        return {"kind": self.kind, "timesteps": self.timesteps}

    @classmethod
    def from_dict(cls, doc):
        kind = doc.get("kind", "cosine")
        timesteps = int(doc.get("timesteps", 1000))
        if kind == "cosine":
            return cls.cosine(timesteps)
        if kind == "linear-beta":
            return cls.linear_beta(timesteps)
        raise UsageError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class DiffusionConfig:
    """Everything the forward and reverse processes need to agree on."""

    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.cosine)
    mode: str = "rigid"
    noise_fold: float = DEFAULT_NOISE_FOLD
    sinkhorn_iterations: int = 10
    ddim_eta: float = 0.0
    inference_steps: int = 20

    def __post_init__(self):
        if self.mode not in ("rigid", "deformable"):
            raise UsageError(f"mode must be rigid or deformable, got {self.mode!r}")
        if self.noise_fold <= 0.0:
            raise UsageError("noise_fold must be positive")
        if self.sinkhorn_iterations < 1:
            raise UsageError("sinkhorn_iterations must be at least 1")
        if not 0.0 <= self.ddim_eta <= 1.0:
            raise UsageError("ddim_eta must lie in [0, 1]")
        if not 1 <= self.inference_steps <= self.schedule.timesteps:
            raise UsageError("inference_steps must lie in [1, T]")

    def to_dict(self):
        return {
            "schedule": self.schedule.to_dict(),
            "mode": self.mode,
            "noise_fold": self.noise_fold,
            "sinkhorn_iterations": self.sinkhorn_iterations,
            "ddim_eta": self.ddim_eta,
            "inference_steps": self.inference_steps,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        schedule = NoiseSchedule.from_dict(doc.pop("schedule", {}))
        allowed = {"mode", "noise_fold", "sinkhorn_iterations", "ddim_eta", "inference_steps"}
        unknown = set(doc) - allowed
        if unknown:
            raise UsageError(f"unknown diffusion config keys: {sorted(unknown)}")
        return cls(schedule=schedule, **doc)


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def fold_noise(x, fold=DEFAULT_NOISE_FOLD):
    """Fold unbounded noise into (-fold, fold) keeping sign and fractional
    magnitude: fmod(x, 1) * fold, so 2.3 -> 0.45 and -2.3 -> -0.45 at the
    default amplitude, and 0 maps to 0."""
    return np.fmod(x, 1.0) * fold


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def shape_noise(noise, cfg):
    """Mode-dependent noise shaping: rigid folds, deformable passes through."""
    if cfg.mode == "rigid":
        return fold_noise(noise, cfg.noise_fold)
    return noise


def mode_projection(x, cfg):
    """Mode-dependent nonnegativity map applied before Sinkhorn.

    The rigid branch shifts the global minimum out only when it is
    negative, so already-nonnegative states (the zero-noise limit, an
    exact prediction at the terminal step) pass through unchanged.
    """
    if cfg.mode == "rigid":
        return x - min(float(x.min()), 0.0)
    return _stable_sigmoid(x)


def _validate_noise(noise, shape):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != shape:
        raise ShapeMismatch(f"noise shape {noise.shape} does not match {shape}")
    if not np.isfinite(noise).all():
        raise NonFiniteNoise("noise draw contains NaN or infinity")
    return noise


def forward_marginal(clean_entries, t, cfg, noise):
    """Pre-projection forward state sqrt(abar)*x0 + sqrt(1-abar)*shaped."""
    ab = cfg.schedule.alpha_bar(t)
    return math.sqrt(ab) * clean_entries + math.sqrt(1.0 - ab) * shape_noise(noise, cfg)


def forward_diffuse(clean, t, cfg, rng=None, noise=None):
    """Sample the forward process at timestep t and project back.

    t = 0 is the zero-noise limit (abar_0 = 1). Pass noise explicitly for
    reproducibility, otherwise rng (or a fresh default generator) draws
    elementwise standard normals.
    """
    if not 0 <= t <= cfg.schedule.timesteps:
        raise TimestepOutOfRange(f"t={t} outside 0..{cfg.schedule.timesteps}")
    if noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal(clean.shape)
    noise = _validate_noise(noise, clean.shape)
    x = forward_marginal(clean.entries, t, cfg, noise)
    return MatchMatrix(project_array(mode_projection(x, cfg), cfg.sinkhorn_iterations))


def posterior_mean_variance(alpha_t, alpha_bar_prev, clean, noisy):
    """Closed-form Gaussian posterior of the previous state.

    Given x_t | x_{t-1} ~ N(sqrt(alpha_t) x_{t-1}, 1 - alpha_t) and
    x_{t-1} | x_0 ~ N(sqrt(abar_{t-1}) x_0, 1 - abar_{t-1}), the posterior
    over x_{t-1} is Gaussian with

        mean = [sqrt(alpha_t)(1 - abar_{t-1}) x_t
                + sqrt(abar_{t-1})(1 - alpha_t) x_0] / (1 - abar_t)
        var  = (1 - alpha_t)(1 - abar_{t-1}) / (1 - abar_t)

    where abar_t = alpha_t * abar_{t-1}.
    """
    alpha_bar_t = alpha_t * alpha_bar_prev
    denom = 1.0 - alpha_bar_t
    if denom < 1e-12:
        raise DegenerateAlphaBar("posterior undefined as abar_t approaches 1")
    mean = (
        math.sqrt(alpha_t) * (1.0 - alpha_bar_prev) * noisy
        + math.sqrt(alpha_bar_prev) * (1.0 - alpha_t) * clean
    ) / denom
    variance = (1.0 - alpha_t) * (1.0 - alpha_bar_prev) / denom
    return mean, variance


def posterior_params(clean, noisy, t, schedule):
    """Posterior mean matrix and scalar variance at timestep t (1 <= t <= T).

    t = 1 uses the abar_0 = 1 convention: the mean collapses to the clean
    matrix and the variance to zero.
    """
    if not 1 <= t <= schedule.timesteps:
        raise TimestepOutOfRange(f"t={t} outside 1..{schedule.timesteps}")
    if clean.shape != noisy.shape:
        raise ShapeMismatch("clean and noisy matrices disagree in shape")
    mean, var = posterior_mean_variance(
        schedule.alpha(t), schedule.alpha_bar(t - 1), clean.entries, noisy.entries
    )
    return MatchMatrix(mean), var


def ddim_update(noisy, predicted_clean, abar_from, abar_to, eta=0.0, noise=None):
    """Raw DDIM state update on arrays, before any projection.

    Implied noise is read off the current state, then re-applied at the
    destination noise level:

        eps = (x_from - sqrt(abar_from) x0) / sqrt(1 - abar_from)
        sigma = eta * sqrt((1-abar_to)/(1-abar_from)) * sqrt(1 - abar_from/abar_to)
        x_to = sqrt(abar_to) x0 + sqrt(1 - abar_to - sigma^2) eps + sigma z
    """
    if 1.0 - abar_from < 1e-12:
        raise DegenerateAlphaBar("cannot divide out noise at abar ~ 1")
    eps = (noisy - math.sqrt(abar_from) * predicted_clean) / math.sqrt(1.0 - abar_from)
    sigma = 0.0
    if eta > 0.0:
        sigma = (
            eta
            * math.sqrt((1.0 - abar_to) / (1.0 - abar_from))
            * math.sqrt(max(0.0, 1.0 - abar_from / abar_to))
        )
    out = math.sqrt(abar_to) * predicted_clean
    out += math.sqrt(max(0.0, 1.0 - abar_to - sigma * sigma)) * eps
    if sigma > 0.0:
        if noise is None:
            raise UsageError("stochastic ddim update (eta > 0) needs a noise draw")
        out += sigma * noise
    return out, sigma


def ddim_step(noisy, predicted_clean, t_from, t_to, cfg, rng=None, noise=None):
    """One reverse step t_from -> t_to, re-projected onto the polytope."""
    sched = cfg.schedule
    if not 0 <= t_to <= sched.timesteps or not 0 <= t_from <= sched.timesteps:
        raise TimestepOutOfRange(f"timesteps outside 0..{sched.timesteps}")
    if t_to >= t_from:
        raise TimestepOrder(f"need t_to < t_from, got {t_from} -> {t_to}")
    if noisy.shape != predicted_clean.shape:
        raise ShapeMismatch("state and prediction disagree in shape")
    if cfg.ddim_eta > 0.0 and noise is None:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.standard_normal(noisy.shape)
    if noise is not None:
        noise = _validate_noise(noise, noisy.shape)
    x, _ = ddim_update(
        noisy.entries,
        predicted_clean.entries,
        sched.alpha_bar(t_from),
        sched.alpha_bar(t_to),
        cfg.ddim_eta,
        noise,
    )
    return MatchMatrix(project_array(mode_projection(x, cfg), cfg.sinkhorn_iterations))


def timestep_grid(timesteps, inference_steps):
    """inference_steps + 1 timesteps from T down to 0, strictly decreasing.

    int(x + 0.5) rounding keeps the grid strictly monotone for any
    inference_steps <= T (bankers' rounding could collide neighbors).
    """
    if not 1 <= inference_steps <= timesteps:
        raise UsageError("inference_steps must lie in [1, T]")
    span = timesteps / inference_steps
    return [int(timesteps - i * span + 0.5) for i in range(inference_steps + 1)]


def white_noise_matrix(shape, cfg, rng):
    """Fully noised starting state: the forward marginal at t = T with the
    clean-matrix term dropped, then the usual projection."""
    z = rng.standard_normal(shape)
    x = math.sqrt(1.0 - cfg.schedule.alpha_bar(cfg.schedule.timesteps)) * shape_noise(z, cfg)
    return MatchMatrix(project_array(mode_projection(x, cfg), cfg.sinkhorn_iterations))


def reverse_sample(denoiser, pair, cfg, rng=None, initial=None):
    """Run the reverse chain and return (final matrix, trajectory).

    initial = None starts from white noise. The trajectory holds the
    initial state plus one entry per step, so inference_steps = 1 yields
    exactly two states. Fully deterministic given rng's seed state.
    """
    rng = np.random.default_rng() if rng is None else rng
    shape = (len(pair.source), len(pair.target))
    state = white_noise_matrix(shape, cfg, rng) if initial is None else initial
    if state.shape != shape:
        raise ShapeMismatch(
            f"initial matrix shape {state.shape} does not match scene {shape}"
        )
    grid = timestep_grid(cfg.schedule.timesteps, cfg.inference_steps)
    trajectory = [state]
    for t_from, t_to in zip(grid[:-1], grid[1:]):
        predicted = denoiser.predict(state, pair)
        if predicted.shape != shape:
            raise ShapeMismatch("denoiser returned a wrong-shape prediction")
        state = ddim_step(state, predicted, t_from, t_to, cfg, rng=rng)
        trajectory.append(state)
    return state, trajectory


def focal_matching_loss(predicted, target, gamma=2.0, alpha=0.25):
    """Mean binary focal cross-entropy against the target's support.

    Cells with positive target mass are positives. The predicted entry is
    rescaled by N (a perfect 1/N-scaled assignment scores ~1) and clamped
    to [1e-7, 1 - 1e-7]. gamma = 0, alpha = 0.5 recovers half the plain
    binary cross-entropy.
    """
    if predicted.shape != target.shape:
        raise ShapeMismatch("prediction and target disagree in shape")
    if gamma < 0.0:
        raise UsageError("gamma must be nonnegative")
    if not 0.0 < alpha < 1.0:
        raise UsageError("alpha must lie in (0, 1)")
    support = target.entries > 0.0
    return float(
        _focal_loss_array(predicted.entries, support, gamma, alpha)[0]
    )


def _focal_loss_array(pred_entries, support, gamma, alpha):
    """(loss, dloss/dpred) for the focal objective; gradient is exact for
    entries inside the clamp band and zero outside it."""
    n = pred_entries.shape[0]
    p_raw = pred_entries * n
    p = np.clip(p_raw, 1e-7, 1.0 - 1e-7)
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_1p
    cells = np.where(support, pos, neg)
    loss = cells.mean()
    if gamma == 0.0:
        dpos = -alpha / p
        dneg = (1.0 - alpha) / (1.0 - p)
    else:
        dpos = alpha * (
            gamma * (1.0 - p) ** (gamma - 1.0) * log_p - (1.0 - p) ** gamma / p
        )
        dneg = -(1.0 - alpha) * (
            gamma * p ** (gamma - 1.0) * log_1p - p**gamma / (1.0 - p)
        )
    dcells = np.where(support, dpos, dneg)
    inside = (p_raw > 1e-7) & (p_raw < 1.0 - 1e-7)
    dpred = np.where(inside, dcells, 0.0) * n / pred_entries.size
    return loss, dpred


# ---------------------------------------------------------------------------
# trajectory dumps

def dump_trajectory(dirpath, trajectory, cfg, seed=None):
    """Write trajectory frames plus a manifest tying them to the config."""
    os.makedirs(dirpath, exist_ok=True)
    grid = timestep_grid(cfg.schedule.timesteps, cfg.inference_steps)
    if len(trajectory) != len(grid):
        grid = grid[: len(trajectory)]
    frames = []
    for i, frame in enumerate(trajectory):
        name = f"frame_{i:04d}.bin"
        save_matrix(os.path.join(dirpath, name), frame)
        frames.append(name)
    manifest = {
        "format_version": TRAJECTORY_FORMAT_VERSION,
        "timesteps": grid,
        "alpha_bars": [cfg.schedule.alpha_bar(t) for t in grid],
        "seed": seed,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "frames": frames,
    }
    path = os.path.join(dirpath, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def load_trajectory(dirpath):
    path = os.path.join(dirpath, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        frames = [load_matrix(os.path.join(dirpath, n)) for n in manifest["frames"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise IOFormatError(f"{dirpath}: malformed trajectory manifest ({exc})") from exc
    return manifest, frames


def with_mode(cfg, mode):
    """Config copy with the noising mode swapped; schedules are shared."""
    return replace(cfg, mode=mode)
