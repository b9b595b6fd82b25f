"""Command-line front end.

Subcommands: generate (write a scene bundle), register (run the reverse
sampler on a bundle), train (fit the attention denoiser on a bundle
directory), eval (recompute metrics for a stored matrix), sweep (run a
seeded experiment grid), inspect (print matching-matrix statistics).

Configuration precedence everywhere: built-in defaults, then --config
file values, then repeated --set dotted.key=value overrides, then
dedicated flags. Every JSON output embeds the fully resolved config and
a format_version. Primary outputs are byte-identical for equal seeds
and configs; wall-clock numbers go to a separate timing.json. On
failure no partial primary outputs are left behind.

Exit codes: 0 success, 2 usage errors, 3 I/O errors, 4 numeric errors.
DIFFREG_LOG={error,warn,info,debug} sets log verbosity.
"""

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings

import numpy as np

from .bench import (
    ExperimentConfig,
    GeneratorSpec,
    estimate_transform,
    evaluate_matrix,
    extract_correspondences,
    generate_scene,
    inlier_ratio,
    load_bundle,
    run_experiment,
    save_bundle,
    write_results,
)
from .denoiser import (
    AttentionParams,
    build_denoiser,
    load_training_state,
    save_training_state,
    train_denoiser,
    training_loss,
)
from .diffusion import (
    DiffusionConfig,
    dump_trajectory,
    forward_diffuse,
    reverse_sample,
    timestep_grid,
)
from .errors import (
    DiffRegError,
    EmptyPredictionWarning,
    IOFormatError,
    NumericError,
    UsageError,
)
from .matrixspace import (
    MatchMatrix,
    ground_truth_matrix,
    load_matrix,
    load_matrix_json,
    save_matrix,
)

log = logging.getLogger("diffreg.cli")

RESULT_FORMAT_VERSION = 1

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# config plumbing

def _load_config_file(path):
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _parse_set_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(config, assignments):
    """Apply repeated --set dotted.path=value entries in order."""
    for item in assignments or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise UsageError(f"--set has an empty key in {item!r}")
        node = config
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = _parse_set_value(raw)
    return config


def _resolve_config(args, defaults):
    config = json.loads(json.dumps(defaults))  # deep copy of plain data
    if getattr(args, "config", None):
        file_doc = _load_config_file(args.config)
        for key, value in file_doc.items():
            if isinstance(value, dict) and isinstance(config.get(key), dict):
                config[key].update(value)
            else:
                config[key] = value
    _apply_overrides(config, getattr(args, "set", None))
    return config


class _OutputSet:
    """Tracks written files so a failed command leaves nothing behind."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.written = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write_json(self, name, doc, indent=1):
        path = self.path(name)
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=indent)
            fh.write("\n")
        os.replace(tmp, path)
        self.written.append(path)
        return path

    def write_with(self, name, writer):
        path = self.path(name)
        writer(path)
        self.written.append(path)
        return path

    def discard(self):
        for path in reversed(self.written):
            try:
                os.remove(path)
            except OSError:
                pass


def _matrix_from_file(path):
    if not os.path.exists(path):
        raise UsageError(f"matrix file not found: {path}")
    if path.endswith(".json"):
        return load_matrix_json(path)
    return load_matrix(path)


def _denoiser_config_from_flag(flag):
    if flag is None:
        return None
    if flag == "analytic":
        return {"kind": "analytic"}
    if flag == "oracle":
        return {"kind": "oracle"}
    if flag.startswith("trained:"):
        path = flag.split(":", 1)[1]
        if not path:
            raise UsageError("--denoiser trained: needs a parameter path")
        if not os.path.exists(path):
            raise UsageError(f"trained denoiser parameters not found: {path}")
        return {"kind": "trained", "params_path": path}
    raise UsageError(
        f"unknown denoiser {flag!r}; expected analytic, oracle, or trained:PATH"
    )


def _bundle_dirs(dataset_dir):
    if not os.path.isdir(dataset_dir):
        raise UsageError(f"dataset directory not found: {dataset_dir}")
    if os.path.exists(os.path.join(dataset_dir, "gt.json")):
        return [dataset_dir]
    found = sorted(
        os.path.join(dataset_dir, name)
        for name in os.listdir(dataset_dir)
        if os.path.exists(os.path.join(dataset_dir, name, "gt.json"))
    )
    return found


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    defaults = GeneratorSpec().to_dict()
    config = _resolve_config(args, defaults)
    for flag, key in (
        ("n_points", "n_points"),
        ("overlap", "overlap_fraction"),
        ("noise", "noise_sigma"),
        ("mode", "mode"),
        ("deformation", "deformation_amplitude"),
        ("descriptors", "descriptor_kind"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    spec = GeneratorSpec.from_dict(config)
    pair = generate_scene(spec)
    outputs = _OutputSet(args.out)
    try:
        save_bundle(args.out, pair)
        outputs.written.extend(
            outputs.path(name) for name in ("source.ply", "target.ply", "gt.json")
        )
        if args.write_gt_matrix:
            outputs.write_with(
                "gt_matrix.bin", lambda p: save_matrix(p, ground_truth_matrix(pair))
            )
        manifest = outputs.write_json(
            "bundle.json",
            {
                "format_version": RESULT_FORMAT_VERSION,
                "config": spec.to_dict(),
                "files": sorted(os.path.basename(p) for p in outputs.written),
                "achieved_overlap": pair.gt_pairs.shape[0] / len(pair.source),
                "scene_diameter": pair.scene_diameter,
            },
        )
    except BaseException:
        outputs.discard()
        raise
    print(manifest)
    return 0


_REGISTER_DEFAULTS = {
    "diffusion": {"schedule": {"kind": "cosine", "timesteps": 1000}},
    "denoiser": {"kind": "analytic"},
    "tau_fraction": 0.04,
    "extraction": "mutual",
    "extraction_k": 128,
    "nfmr_k": 3,
    "seed": 0,
}


def _trajectory_inlier_ratios(trajectory, pair, tau_fraction, extraction, extraction_k):
    values = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyPredictionWarning)
        for state in trajectory:
            pred = extract_correspondences(state, extraction, extraction_k)
            values.append(inlier_ratio(pred, pair, tau_fraction * pair.scene_diameter))
    return values


def cmd_register(args):
    pair = load_bundle(args.bundle)
    config = _resolve_config(args, _REGISTER_DEFAULTS)
    config["diffusion"].setdefault("mode", pair.mode)
    if args.steps is not None:
        config["diffusion"]["inference_steps"] = args.steps
    if args.seed is not None:
        config["seed"] = args.seed
    denoiser_cfg = _denoiser_config_from_flag(args.denoiser)
    if denoiser_cfg is not None:
        config["denoiser"] = denoiser_cfg
    init_matrix = None
    init_kind = args.init or "noise"
    if init_kind != "noise":
        if not init_kind.startswith("matrix:"):
            raise UsageError(f"--init must be noise or matrix:PATH, got {init_kind!r}")
        init_matrix = _matrix_from_file(init_kind.split(":", 1)[1])
    config["init"] = init_kind

    diffusion_cfg = DiffusionConfig.from_dict(config["diffusion"])
    denoiser = build_denoiser(config["denoiser"])
    rng = np.random.default_rng(int(config["seed"]))

    started = time.perf_counter()
    final, trajectory = reverse_sample(
        denoiser, pair, diffusion_cfg, rng=rng, initial=init_matrix
    )
    sampling_seconds = time.perf_counter() - started

    started = time.perf_counter()
    report = evaluate_matrix(
        final,
        pair,
        tau_fraction=config["tau_fraction"],
        extraction=config["extraction"],
        extraction_k=config["extraction_k"],
        nfmr_k=config["nfmr_k"],
    )
    pred = extract_correspondences(final, config["extraction"], config["extraction_k"])
    estimated = estimate_transform(final, pred, pair)
    step_ir = _trajectory_inlier_ratios(
        trajectory, pair, config["tau_fraction"], config["extraction"],
        config["extraction_k"],
    )
    metrics_seconds = time.perf_counter() - started

    grid = timestep_grid(diffusion_cfg.schedule.timesteps, diffusion_cfg.inference_steps)
    result = {
        "format_version": RESULT_FORMAT_VERSION,
        "config": {
            key: config[key]
            for key in (
                "diffusion", "denoiser", "tau_fraction", "extraction",
                "extraction_k", "nfmr_k", "seed", "init",
            )
        },
        "scene": {
            "bundle": args.bundle,
            "mode": pair.mode,
            "seed": pair.seed,
            "scene_diameter": pair.scene_diameter,
            "n_source": len(pair.source),
            "n_target": len(pair.target),
        },
        "correspondences": {
            "source_indices": pred.source_indices.tolist(),
            "target_indices": pred.target_indices.tolist(),
            "confidences": pred.confidences.tolist(),
        },
        "transform": {
            "rotation": estimated.rotation.tolist(),
            "translation": estimated.translation.tolist(),
        },
        "metrics": report.to_dict(),
        "trajectory": {
            "timesteps": grid[: len(step_ir)],
            "inlier_ratio": step_ir,
        },
    }

    outputs = _OutputSet(args.out)
    try:
        outputs.write_json("result.json", result)
        outputs.write_with("matrix.bin", lambda p: save_matrix(p, final))
        if args.dump_trajectory:
            dump_trajectory(
                outputs.path("trajectory"), trajectory, diffusion_cfg,
                seed=int(config["seed"]),
            )
        outputs.write_json(
            "timing.json",
            {
                "format_version": RESULT_FORMAT_VERSION,
                "seconds": {"sampling": sampling_seconds, "metrics": metrics_seconds},
            },
        )
    except BaseException:
        outputs.discard()
        raise
    print(outputs.path("result.json"))
    print(
        f"steps={diffusion_cfg.inference_steps}"
        f" inlier_ratio={report.inlier_ratio:.4f}"
        f" nfmr={report.nfmr:.4f}"
        f" rotation_error_deg={report.rotation_error:.4f}"
    )
    return 0


_TRAIN_DEFAULTS = {
    "diffusion": {"schedule": {"kind": "cosine", "timesteps": 1000}},
    "iterations": 200,
    "learning_rate": 2.0,
    "momentum": 0.9,
    "seed": 0,
    "n_layers": 2,
    "init_scale": 1.0,
    "gamma": 2.0,
    "alpha": 0.25,
    "probe_batch": 8,
}


def _probe_loss(params, pairs, diffusion_cfg, seed, batch, gamma, alpha):
    """Mean loss over a fixed probe batch; depends only on (seed, data)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD1FF]))
    targets = [ground_truth_matrix(p, iterations=100) for p in pairs]
    total = 0.0
    timesteps = diffusion_cfg.schedule.timesteps
    for i in range(batch):
        idx = i % len(pairs)
        t = int(rng.integers(1, timesteps + 1))
        noise = rng.standard_normal(targets[idx].shape)
        noisy = forward_diffuse(targets[idx], t, diffusion_cfg, noise=noise)
        total += training_loss(
            params, pairs[idx], noisy, targets[idx],
            sinkhorn_iterations=diffusion_cfg.sinkhorn_iterations,
            gamma=gamma, alpha=alpha,
        )
    return total / batch


def cmd_train(args):
    bundles = _bundle_dirs(args.dataset)
    if not bundles:
        raise UsageError(f"no scene bundles found under {args.dataset}")
    pairs = [load_bundle(d) for d in bundles]
    if any(p.source.descriptors is None or p.target.descriptors is None for p in pairs):
        raise UsageError("training bundles must carry descriptors on both clouds")
    dims = {p.source.descriptors.shape[1] for p in pairs}
    dims |= {p.target.descriptors.shape[1] for p in pairs}
    if len(dims) != 1:
        raise UsageError(f"bundles disagree on descriptor dimension: {sorted(dims)}")
    d = dims.pop()

    config = _resolve_config(args, _TRAIN_DEFAULTS)
    for flag, key in (
        ("iterations", "iterations"),
        ("lr", "learning_rate"),
        ("momentum", "momentum"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    config["diffusion"].setdefault("mode", pairs[0].mode)
    diffusion_cfg = DiffusionConfig.from_dict(config["diffusion"])

    if args.resume:
        if not os.path.exists(args.resume):
            raise UsageError(f"resume checkpoint not found: {args.resume}")
        state = load_training_state(args.resume)
        if state.params.d != d:
            raise UsageError(
                f"checkpoint dimension {state.params.d} does not match data {d}"
            )
        params = state.params
        resume_kwargs = {
            "rng": state.rng,
            "velocity": state.velocity,
            "start_iteration": state.iteration,
            "loss_history": state.loss_history,
            # probes derive from the original run's seed so the resumed
            # loss curve continues the same measurement
            "seed": state.seed,
        }
    else:
        params = AttentionParams.random(
            d,
            n_layers=int(config["n_layers"]),
            rng=np.random.default_rng(np.random.SeedSequence([int(config["seed"]), 1])),
            scale=float(config["init_scale"]),
        )
        resume_kwargs = {"seed": int(config["seed"])}

    initial_probe = _probe_loss(
        params, pairs, diffusion_cfg, config["seed"], int(config["probe_batch"]),
        config["gamma"], config["alpha"],
    )
    result = train_denoiser(
        params, pairs, diffusion_cfg, int(config["iterations"]),
        learning_rate=float(config["learning_rate"]),
        momentum=float(config["momentum"]),
        gamma=config["gamma"], alpha=config["alpha"],
        probe_batch=int(config["probe_batch"]),
        **resume_kwargs,
    )
    final_probe = _probe_loss(
        result.params, pairs, diffusion_cfg, config["seed"],
        int(config["probe_batch"]), config["gamma"], config["alpha"],
    )
    ratio = final_probe / initial_probe if initial_probe > 0.0 else math.inf

    outputs = _OutputSet(args.out)
    try:
        save_training_state(outputs.path("params.bin"), result)
        outputs.written.extend(
            outputs.path(name)
            for name in ("params.bin", "params.bin.state.json", "params.bin.velocity.bin")
        )

        def write_history(path):
            with open(path, "w") as fh:
                fh.write("iteration,loss\n")
                for i, loss in enumerate(result.loss_history):
                    fh.write(f"{i},{loss!r}\n")

        outputs.write_with("loss_history.csv", write_history)
        outputs.write_json(
            "train.json",
            {
                "format_version": RESULT_FORMAT_VERSION,
                "config": {**config, "feature_dim": d, "resumed_from": args.resume},
                "bundles": [os.path.basename(b) for b in bundles],
                "iterations_done": result.iteration,
                "initial_probe_loss": initial_probe,
                "final_probe_loss": final_probe,
                "loss_ratio": ratio,
            },
        )
    except BaseException:
        outputs.discard()
        raise
    print(f"loss ratio {ratio:.4f}")
    print(outputs.path("params.bin"))
    return 0


_EVAL_DEFAULTS = {
    "tau_fraction": 0.04,
    "extraction": "mutual",
    "extraction_k": 128,
    "nfmr_k": 3,
}


def cmd_eval(args):
    pair = load_bundle(args.bundle)
    matrix = _matrix_from_file(args.matrix)
    if matrix.shape != (len(pair.source), len(pair.target)):
        raise UsageError(
            f"matrix shape {matrix.shape} does not match scene "
            f"({len(pair.source)}, {len(pair.target)})"
        )
    config = _resolve_config(args, _EVAL_DEFAULTS)
    report = evaluate_matrix(
        matrix,
        pair,
        tau_fraction=config["tau_fraction"],
        extraction=config["extraction"],
        extraction_k=config["extraction_k"],
        nfmr_k=config["nfmr_k"],
    )
    doc = {
        "format_version": RESULT_FORMAT_VERSION,
        "config": {**config, "bundle": args.bundle, "matrix": args.matrix},
        "metrics": report.to_dict(),
    }
    if args.out:
        outputs = _OutputSet(args.out)
        try:
            outputs.write_json("eval.json", doc)
        except BaseException:
            outputs.discard()
            raise
    for name in ("inlier_ratio", "nfmr", "rotation_error", "translation_error", "epe"):
        print(f"{name} {getattr(report, name)!r}")
    return 0


_SWEEP_DEFAULTS = {
    "generator": {},
    "denoiser": {"kind": "analytic"},
    "diffusion": {"schedule": {"kind": "cosine", "timesteps": 1000}},
    "trials": 10,
    "seed": 0,
    "steps": [1, 20],
    "tau_fraction": 0.04,
    "extraction": "mutual",
    "extraction_k": 128,
    "nfmr_k": 3,
}


def cmd_sweep(args):
    config = _resolve_config(args, _SWEEP_DEFAULTS)
    if args.seed is not None:
        config["seed"] = args.seed
    overlaps = None
    if args.overlaps:
        try:
            overlaps = [float(v) for v in args.overlaps.split(",") if v]
        except ValueError as exc:
            raise UsageError(f"--overlaps expects comma-separated floats: {exc}") from exc
        if not overlaps:
            raise UsageError("--overlaps was given but holds no values")
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)

    runs = []
    for overlap in overlaps if overlaps is not None else [None]:
        run_cfg = json.loads(json.dumps(config))
        label = "run"
        if overlap is not None:
            run_cfg["generator"]["overlap_fraction"] = overlap
            label = f"overlap_{overlap:.2f}"
        runs.append((label, overlap, ExperimentConfig.from_dict(run_cfg)))

    outputs = _OutputSet(args.out)
    try:
        combined = []
        summaries = {}
        for label, overlap, experiment in runs:
            result = run_experiment(experiment, workers=workers)
            subdir = outputs.path(label)
            write_results(subdir, result)
            outputs.written.extend(
                os.path.join(subdir, name)
                for name in ("results.jsonl", "summary.json", "table.csv", "timing.json")
            )
            summaries[label] = result.summary
            for row in result.rows:
                if "error" in row:
                    continue
                for steps, report in sorted(
                    row["reports"].items(), key=lambda kv: int(kv[0])
                ):
                    combined.append(
                        {
                            "run": label,
                            "overlap": overlap,
                            "trial": row["trial"],
                            "steps": int(steps),
                            **report.to_dict(),
                        }
                    )

        def write_csv(path):
            import csv as _csv

            head = ["run", "overlap", "trial", "steps"]
            fields = head + [k for k in combined[0] if k not in head]
            with open(path, "w", newline="") as fh:
                writer = _csv.DictWriter(fh, fieldnames=fields)
                writer.writeheader()
                writer.writerows(combined)

        if combined:
            outputs.write_with("sweep.csv", write_csv)
        # worker count changes wall time, never results; keep it out of
        # the primary outputs so equal configs stay byte-identical
        outputs.write_json(
            "sweep.json",
            {
                "format_version": RESULT_FORMAT_VERSION,
                "config": config,
                "overlaps": overlaps,
                "summaries": summaries,
            },
        )
        outputs.write_json(
            "timing.json",
            {"format_version": RESULT_FORMAT_VERSION, "workers": workers},
        )
    except BaseException:
        outputs.discard()
        raise
    print(outputs.path("sweep.json"))
    return 0


def cmd_inspect(args):
    matrix = _matrix_from_file(args.matrix)
    entries = matrix.entries
    row_arg = entries.argmax(axis=1)
    col_arg = entries.argmax(axis=0)
    mutual = float((col_arg[row_arg] == np.arange(matrix.n_rows)).mean())
    entropies = matrix.row_entropies()
    stats = {
        "format_version": RESULT_FORMAT_VERSION,
        "path": args.matrix,
        "shape": list(matrix.shape),
        "total_mass": matrix.total_mass(),
        "row_sum_max_deviation": matrix.max_row_deviation(),
        "col_sum_max_deviation": matrix.max_col_deviation(),
        "row_entropy_mean": float(entropies.mean()),
        "row_entropy_min": float(entropies.min()),
        "row_entropy_max": float(entropies.max()),
        "mutual_argmax_agreement": mutual,
        "max_entry": float(entries.max()),
        "min_entry": float(entries.min()),
    }
    if args.json:
        print(json.dumps(stats, sort_keys=True))
    else:
        for key in sorted(stats):
            print(f"{key}: {stats[key]}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="diffreg",
        description="Point-cloud registration by diffusion over matching matrices.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config key (dotted path), repeatable",
        )

    p = sub.add_parser("generate", help="write a synthetic scene bundle")
    common(p)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--overlap", type=float, help="overlap fraction in (0, 1]")
    p.add_argument("--noise", type=float, help="target noise sigma")
    p.add_argument("--mode", choices=("rigid", "deformable"))
    p.add_argument("--deformation", type=float, help="deformation RMS amplitude")
    p.add_argument("--descriptors", choices=("oracle", "local", "none"))
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--write-gt-matrix", action="store_true",
        help="also write gt_matrix.bin (projected ground-truth matrix)",
    )
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("register", help="run the reverse sampler on a bundle")
    common(p)
    p.add_argument("bundle", help="scene bundle directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="reverse sampling steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--denoiser", help="analytic, oracle, or trained:PATH")
    p.add_argument("--init", help="noise (default) or matrix:PATH")
    p.add_argument(
        "--dump-trajectory", action="store_true",
        help="also dump every intermediate matrix under trajectory/",
    )
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train the attention denoiser on bundles")
    common(p)
    p.add_argument("dataset", help="bundle directory or directory of bundles")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="continue from a params.bin checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics for a stored matrix")
    common(p)
    p.add_argument("--bundle", required=True, help="scene bundle directory")
    p.add_argument("--matrix", required=True, help="matrix file (.bin or .json)")
    p.add_argument("--out", help="optional output directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a seeded experiment (grid)")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel trial workers")
    p.add_argument("--overlaps", help="comma-separated overlap grid, e.g. 0.3,0.5,0.9")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="print matching-matrix statistics")
    p.add_argument("matrix", help="matrix file (.bin or .json)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_inspect)

    return parser


def _configure_logging():
    level_name = os.environ.get("DIFFREG_LOG", "warn").lower()
    levels = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "warning": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    logging.basicConfig(
        level=levels.get(level_name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None):
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IOFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DiffRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
