"""Training loop and exact gradients for the attention denoiser.

The trainable part of a denoising pass is everything downstream of the
rigid alignment: attention features, dot-product scores, the matcher's
normalization sweeps, and the focal loss against the clean matrix's
support. The alignment itself depends only on the noisy input, never on
the weights, so treating it as a constant is exact, not an approximation.

The normalization sweeps are differentiated by unrolling: the forward
pass records each half-sweep's input and scale, and the backward pass
replays them in reverse. Plain SGD with momentum is enough at this
scale; checkpoints capture weights, velocity, and generator state so a
resumed run is bit-identical to an uninterrupted one.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..diffusion import _focal_loss_array, forward_diffuse
from ..errors import MissingDescriptors, ParamsFormatError, UsageError
from ..matrixspace import MatchMatrix, ground_truth_matrix, project_array
from .attention import (
    AttentionFeatureNet,
    AttentionParams,
    attention_backward,
    attention_forward,
    load_params,
    save_params,
)
from .pipeline import predict_target_matrix, soft_procrustes
from .positional import sinusoidal_encoding

TRAINING_STATE_VERSION = 1


def sinkhorn_log_forward(logits, iterations):
    """Unrolled log-domain projection; returns (matrix, cache).

    Matches the inference-time projection: subtract each row's max,
    exponentiate, then alternate column and row normalization ending on
    a row pass. The row shift makes the map invariant to adding a
    constant to all logits. Zero-sum lines (possible only through exp
    underflow) pass through unscaled, same as the in-place kernel.
    """
    if iterations < 1:
        raise UsageError("iterations must be at least 1")
    logits = np.asarray(logits, dtype=np.float64)
    n, m = logits.shape
    row_target, col_target = 1.0 / n, 1.0 / m
    amax = logits.argmax(axis=1)
    a = np.exp(logits - logits[np.arange(n), amax][:, None])
    exp_out = a
    steps = []
    for _ in range(iterations):
        sums = a.sum(axis=0)
        scale = np.ones_like(sums)
        np.divide(col_target, sums, out=scale, where=sums > 0.0)
        steps.append(("col", a, sums, scale))
        a = a * scale[None, :]
        sums = a.sum(axis=1)
        scale = np.ones_like(sums)
        np.divide(row_target, sums, out=scale, where=sums > 0.0)
        steps.append(("row", a, sums, scale))
        a = a * scale[:, None]
    cache = {"amax": amax, "exp_out": exp_out, "steps": steps}
    return a, cache


def sinkhorn_log_backward(cache, g_out):
    """Gradient of sinkhorn_log_forward's output w.r.t. the logits."""
    g = np.asarray(g_out, dtype=np.float64)
    for axis, a_in, sums, scale in reversed(cache["steps"]):
        if axis == "col":
            dot = (g * a_in).sum(axis=0)
            adj = np.zeros_like(dot)
            np.divide(dot, sums, out=adj, where=sums > 0.0)
            g = scale[None, :] * (g - adj[None, :])
        else:
            dot = (g * a_in).sum(axis=1)
            adj = np.zeros_like(dot)
            np.divide(dot, sums, out=adj, where=sums > 0.0)
            g = scale[:, None] * (g - adj[:, None])
    d_shifted = g * cache["exp_out"]
    d_logits = d_shifted.copy()
    n = d_logits.shape[0]
    d_logits[np.arange(n), cache["amax"]] -= d_shifted.sum(axis=1)
    return d_logits


def _forward_pass(params, pair, noisy, *, sinkhorn_iterations=10,
                  procrustes_mode="all", procrustes_topk=128, want_cache=False):
    """Inference-time computation with an attention feature net.

    Returns a dict with the predicted entries, logits, and (when
    want_cache) the layer and normalization caches the backward pass
    replays.
    """
    if pair.source.descriptors is None or pair.target.descriptors is None:
        raise MissingDescriptors("training needs descriptors on both clouds")
    smoothed = MatchMatrix(project_array(noisy.entries, sinkhorn_iterations))
    transform = soft_procrustes(smoothed, pair, procrustes_mode, procrustes_topk)
    warped = transform.apply(pair.source.points)
    src_enc = sinusoidal_encoding(warped, params.d)
    tgt_enc = sinusoidal_encoding(pair.target.points, params.d)
    fs, ft, caches = attention_forward(
        params, pair.source.descriptors, pair.target.descriptors,
        src_enc, tgt_enc, want_cache=want_cache,
    )
    scale = 1.0 / math.sqrt(params.d)
    logits = (fs @ ft.T) * scale
    prediction, sk_cache = sinkhorn_log_forward(logits, sinkhorn_iterations)
    return {
        "prediction": prediction,
        "logits": logits,
        "fs": fs,
        "ft": ft,
        "scale": scale,
        "caches": caches,
        "sk_cache": sk_cache,
    }


def training_loss(params, pair, noisy, clean, *, sinkhorn_iterations=10,
                  procrustes_mode="all", procrustes_topk=128,
                  gamma=2.0, alpha=0.25):
    """Loss of the attention denoiser on one noisy state, no gradients."""
    fwd = _forward_pass(
        params, pair, noisy, sinkhorn_iterations=sinkhorn_iterations,
        procrustes_mode=procrustes_mode, procrustes_topk=procrustes_topk,
    )
    loss, _ = _focal_loss_array(fwd["prediction"], clean.entries > 0.0, gamma, alpha)
    return float(loss)


def loss_and_param_gradients(params, pair, noisy, clean, *,
                             sinkhorn_iterations=10, procrustes_mode="all",
                             procrustes_topk=128, gamma=2.0, alpha=0.25):
    """One full denoising pass with exact parameter gradients.

    Runs the same computation as inference with an attention feature
    net, keeping caches for the differentiable tail, and returns
    (loss, gradients, extras). extras carries the predicted matrix, the
    raw logits, and the loss gradient at the logits.
    """
    fwd = _forward_pass(
        params, pair, noisy, sinkhorn_iterations=sinkhorn_iterations,
        procrustes_mode=procrustes_mode, procrustes_topk=procrustes_topk,
        want_cache=True,
    )
    support = clean.entries > 0.0
    loss, d_pred = _focal_loss_array(fwd["prediction"], support, gamma, alpha)
    d_logits = sinkhorn_log_backward(fwd["sk_cache"], d_pred)
    scale = fwd["scale"]
    d_fs = (d_logits @ fwd["ft"]) * scale
    d_ft = (d_logits.T @ fwd["fs"]) * scale
    grads, _, _ = attention_backward(params, fwd["caches"], d_fs, d_ft)
    extras = {
        "prediction": MatchMatrix(fwd["prediction"]),
        "logits": fwd["logits"],
        "logits_gradient": d_logits,
    }
    return float(loss), grads, extras


@dataclass
class TrainingResult:
    """Weights and bookkeeping after (part of) a training run."""

    params: AttentionParams
    velocity: dict
    iteration: int
    rng: np.random.Generator
    loss_history: list
    seed: int = 0


def train_denoiser(params, pairs, diffusion_cfg, iterations, *,
                   learning_rate=2.0, momentum=0.9, seed=0, rng=None,
                   velocity=None, start_iteration=0, loss_history=None,
                   targets=None, probe_batch=4, gamma=2.0, alpha=0.25,
                   gt_iterations=100, sinkhorn_iterations=None, callback=None):
    """SGD with momentum over noisy states drawn from the forward process.

    Scenes are visited round-robin; the timestep and noise draw come
    from one generator, so (seed, iteration count) pins the entire run.
    Pass velocity / start_iteration / rng from a loaded checkpoint to
    resume exactly.

    The recorded loss curve is measured on a fixed probe batch (derived
    from the seed, one noisy state per probe) rather than on the
    per-step stochastic sample, so it moves only when the weights move:
    a zero learning rate yields a bitwise-constant history, and curves
    from different runs of the same seed are comparable point by point.

    targets overrides the clean matrix per scene (default: the scene's
    ground-truth matrix); callback receives (step, per-step sample loss).
    """
    if not pairs:
        raise UsageError("training needs at least one scene pair")
    if iterations < 0:
        raise UsageError("iterations must be nonnegative")
    if probe_batch < 1:
        raise UsageError("probe_batch must be at least 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    if sinkhorn_iterations is None:
        sinkhorn_iterations = diffusion_cfg.sinkhorn_iterations
    if targets is None:
        targets = [ground_truth_matrix(p, iterations=gt_iterations) for p in pairs]
    elif len(targets) != len(pairs):
        raise UsageError("targets must have one clean matrix per scene pair")
    velocity = params.zero_gradients() if velocity is None else dict(velocity)
    history = list(loss_history) if loss_history is not None else []
    timesteps = diffusion_cfg.schedule.timesteps

    probe_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9B0BE]))
    probes = []
    for b in range(probe_batch):
        idx = b % len(pairs)
        t = int(probe_rng.integers(1, timesteps + 1))
        noise = probe_rng.standard_normal(targets[idx].shape)
        probes.append(
            (idx, forward_diffuse(targets[idx], t, diffusion_cfg, noise=noise))
        )

    def probe_loss(at_params):
        values = [
            training_loss(
                at_params, pairs[idx], noisy, targets[idx],
                sinkhorn_iterations=sinkhorn_iterations, gamma=gamma, alpha=alpha,
            )
            for idx, noisy in probes
        ]
        return float(np.mean(values))

    for step in range(start_iteration, start_iteration + iterations):
        idx = step % len(pairs)
        t = int(rng.integers(1, timesteps + 1))
        noise = rng.standard_normal(targets[idx].shape)
        noisy = forward_diffuse(targets[idx], t, diffusion_cfg, noise=noise)
        loss, grads, _ = loss_and_param_gradients(
            params, pairs[idx], noisy, targets[idx],
            sinkhorn_iterations=sinkhorn_iterations, gamma=gamma, alpha=alpha,
        )
        deltas = {}
        for name in params.tensor_order:
            velocity[name] = momentum * velocity[name] - learning_rate * grads[name]
            deltas[name] = velocity[name]
        params = params.apply_update(deltas)
        history.append(probe_loss(params))
        if callback is not None:
            callback(step, loss)
    return TrainingResult(
        params=params,
        velocity=velocity,
        iteration=start_iteration + iterations,
        rng=rng,
        loss_history=history,
        seed=int(seed),
    )


def _velocity_wrapper(params, velocity):
    return AttentionParams(params.d, params.n_layers, velocity)


def save_training_state(path, result):
    """Write weights plus the sidecars needed for exact resumption.

    path gets the parameter archive; path + ".state.json" records the
    iteration counter, generator state, and loss history; path +
    ".velocity.bin" holds the momentum buffers.
    """
    save_params(path, result.params)
    save_params(
        path + ".velocity.bin", _velocity_wrapper(result.params, result.velocity)
    )
    state = {
        "format_version": TRAINING_STATE_VERSION,
        "iteration": result.iteration,
        "seed": result.seed,
        "rng_state": result.rng.bit_generator.state,
        "loss_history": result.loss_history,
    }
    with open(path + ".state.json", "w") as fh:
        json.dump(state, fh, sort_keys=True)
        fh.write("\n")


def load_training_state(path):
    """Load a checkpoint written by save_training_state.

    Returns a TrainingResult whose fields slot directly into
    train_denoiser's resume arguments.
    """
    params = load_params(path)
    if not os.path.exists(path + ".state.json"):
        raise ParamsFormatError(f"{path}: missing training state sidecar")
    with open(path + ".state.json") as fh:
        try:
            state = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParamsFormatError(f"{path}: bad state sidecar ({exc})") from exc
    if state.get("format_version") != TRAINING_STATE_VERSION:
        raise ParamsFormatError(
            f"{path}: unsupported state version {state.get('format_version')!r}"
        )
    velocity_params = load_params(path + ".velocity.bin")
    if velocity_params.tensor_order != params.tensor_order:
        raise ParamsFormatError(f"{path}: velocity archive does not match weights")
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng_state"]
    return TrainingResult(
        params=params,
        velocity=dict(velocity_params.tensors),
        iteration=int(state["iteration"]),
        rng=rng,
        loss_history=list(state["loss_history"]),
        seed=int(state.get("seed", 0)),
    )


class TrainedDenoiser:
    """Denoiser whose feature net is a trained attention stack."""

    kind = "trained"

    def __init__(self, params, sinkhorn_iterations=10, procrustes_mode="all",
                 procrustes_topk=128, params_path=None):
        self.params = params
        self.net = AttentionFeatureNet(params)
        self.sinkhorn_iterations = sinkhorn_iterations
        self.procrustes_mode = procrustes_mode
        self.procrustes_topk = procrustes_topk
        self.params_path = params_path

    @classmethod
    def from_file(cls, path, **kwargs):
        return cls(load_params(path), params_path=str(path), **kwargs)

    def predict(self, noisy, pair):
        return predict_target_matrix(
            noisy, pair, self.net,
            sinkhorn_iterations=self.sinkhorn_iterations,
            procrustes_mode=self.procrustes_mode,
            procrustes_topk=self.procrustes_topk,
        )

    def to_config(self):
        cfg = {
            "kind": self.kind,
            "sinkhorn_iterations": self.sinkhorn_iterations,
            "procrustes_mode": self.procrustes_mode,
            "procrustes_topk": self.procrustes_topk,
            "feature_dim": self.params.d,
            "n_layers": self.params.n_layers,
        }
        if self.params_path is not None:
            cfg["params_path"] = self.params_path
        return cfg
