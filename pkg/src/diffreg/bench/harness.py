"""Experiment harness: seeded trials, parallel execution, result files.

An experiment is a generator recipe, a denoiser, a diffusion config, a
trial count, and a list of sampling budgets. Every trial builds a fresh
scene from a per-trial seed, runs the reverse sampler once per budget,
and scores the result. Trials are independent: each derives its own
random streams from (master seed, trial index), so the outcome is
identical whether trials run serially or across a process pool, and
re-running a config reproduces every byte.

Timing is collected alongside but kept out of the primary result files,
which must be stable across runs of equal configuration.
"""

import csv
import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..denoiser import build_denoiser, soft_procrustes
from ..diffusion import DiffusionConfig, reverse_sample
from ..errors import DegenerateConfiguration, DiffRegError, UsageError
from ..geometry import (
    FlowField,
    interpolate_flow,
    kabsch_from_weighted_pairs,
    weighted_svd,
)
from ..matrixspace import extract_topk
from .metrics import (
    DEFAULT_TAU_FRACTION,
    MetricsReport,
    flow_metrics,
    inlier_ratio,
    nfmr,
    registration_errors,
)
from .scenes import GeneratorSpec, generate_scene

RESULTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment.

    generator / denoiser / diffusion are the config mappings of the
    owning modules (the generator's seed field is overridden per trial).
    steps lists the sampling budgets to compare on the same scenes.
    """

    generator: dict = field(default_factory=dict)
    denoiser: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    trials: int = 10
    seed: int = 0
    steps: tuple = (1, 20)
    tau_fraction: float = DEFAULT_TAU_FRACTION
    extraction: str = "mutual"
    extraction_k: int = 128
    nfmr_k: int = 3

    def __post_init__(self):
        if self.trials < 0:
            raise UsageError("trials must be nonnegative")
        steps = tuple(int(s) for s in self.steps)
        if not steps or any(s < 1 for s in steps):
            raise UsageError("steps must be a nonempty list of positive ints")
        object.__setattr__(self, "steps", steps)
        if self.extraction not in ("mutual", "topk"):
            raise UsageError("extraction must be 'mutual' or 'topk'")
        if not 0.0 < self.tau_fraction:
            raise UsageError("tau_fraction must be positive")
        if self.nfmr_k < 1 or self.extraction_k < 1:
            raise UsageError("nfmr_k and extraction_k must be at least 1")
        # validate nested configs eagerly so errors surface before any run
        GeneratorSpec.from_dict({**self.generator})
        build_denoiser(self.denoiser)
        DiffusionConfig.from_dict(self.diffusion)

    def to_dict(self):
        out = asdict(self)
        out["steps"] = list(self.steps)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown experiment config keys: {sorted(unknown)}")
        if "steps" in data:
            data["steps"] = tuple(data["steps"])
        return cls(**data)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    summary: dict


def _trial_seed(master_seed, trial):
    ss = np.random.SeedSequence([int(master_seed), int(trial), 0])
    return int(ss.generate_state(1, np.uint64)[0])


def extract_correspondences(matrix, mode, k):
    if mode == "mutual":
        return extract_topk(matrix, min(matrix.shape), mutual=True)
    return extract_topk(matrix, min(k, matrix.entries.size))


def estimate_transform(matrix, pred, pair):
    """Pose from extracted correspondences, dense weights as fallback.

    The extracted pairs exclude rows whose best cell is not mutual, so
    points outside the overlap stop dragging on the fit. One trimmed
    refit follows: pairs whose residual under the first fit exceeds
    three times the median residual are dropped, which removes the
    occasional gross mismatch without touching inliers. The dense path
    only serves extractions too thin to pin down a rotation.
    """
    if len(pred) < 3:
        return soft_procrustes(matrix, pair)
    try:
        fit = weighted_svd(pair.source, pair.target, pred)
    except DegenerateConfiguration:
        return soft_procrustes(matrix, pair)
    src = pair.source.points[pred.source_indices]
    tgt = pair.target.points[pred.target_indices]
    residuals = np.linalg.norm(fit.apply(src) - tgt, axis=1)
    cutoff = max(3.0 * float(np.median(residuals)), 1e-9)
    keep = residuals <= cutoff
    if 3 <= int(keep.sum()) < len(pred):
        try:
            fit = kabsch_from_weighted_pairs(
                src[keep], tgt[keep], pred.confidences[keep]
            )
        except DegenerateConfiguration:
            pass
    return fit


def evaluate_matrix(matrix, pair, tau_fraction=DEFAULT_TAU_FRACTION,
                    extraction="mutual", extraction_k=128, nfmr_k=3,
                    runtime=None):
    """Score one final matching matrix against its scene's ground truth."""
    tau = tau_fraction * pair.scene_diameter
    pred = extract_correspondences(matrix, extraction, extraction_k)
    ir = inlier_ratio(pred, pair, tau)
    recall = nfmr(pred, pair, tau, k=nfmr_k)
    estimated = estimate_transform(matrix, pred, pair)
    rot_err, trans_err = registration_errors(estimated, pair.gt_transform)
    if len(pred.source_indices) == 0:
        flow = FlowField(np.zeros_like(pair.source.points))
    else:
        disp = (
            pair.target.points[pred.target_indices]
            - pair.source.points[pred.source_indices]
        )
        flow = interpolate_flow(
            pair.source, zip(pred.source_indices, disp), k=nfmr_k
        )
    epe, acc_s, acc_r, outliers = flow_metrics(flow, pair)
    return MetricsReport(
        inlier_ratio=ir,
        nfmr=recall,
        rotation_error=rot_err,
        translation_error=trans_err,
        epe=epe,
        acc_s=acc_s,
        acc_r=acc_r,
        outlier_ratio=outliers,
        tau=tau,
        runtime=dict(runtime or {}),
    )


def run_trial(config, trial):
    """One scene, one sampler run per steps budget, scored. Standalone so
    process pools can execute it from just (config dict, trial index)."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    scene_seed = _trial_seed(config.seed, trial)
    pair = generate_scene(
        GeneratorSpec.from_dict({**config.generator, "seed": scene_seed})
    )
    denoiser = build_denoiser(config.denoiser)
    base_cfg = DiffusionConfig.from_dict(config.diffusion)
    reports = {}
    for si, steps in enumerate(config.steps):
        cfg = replace(base_cfg, inference_steps=steps)
        rng = np.random.default_rng(
            np.random.SeedSequence([int(config.seed), int(trial), 1 + si])
        )
        started = time.perf_counter()
        final, _ = reverse_sample(denoiser, pair, cfg, rng=rng)
        sampling_time = time.perf_counter() - started
        started = time.perf_counter()
        report = evaluate_matrix(
            final,
            pair,
            tau_fraction=config.tau_fraction,
            extraction=config.extraction,
            extraction_k=config.extraction_k,
            nfmr_k=config.nfmr_k,
        )
        report.runtime = {
            "sampling": sampling_time,
            "metrics": time.perf_counter() - started,
        }
        reports[str(steps)] = report
    return {"trial": trial, "scene_seed": scene_seed, "reports": reports}


def _run_trial_packed(args):
    config_dict, trial = args
    try:
        return run_trial(config_dict, trial)
    except DiffRegError as exc:
        return {"trial": trial, "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config, workers=1):
    """Run all trials and aggregate. Failures are recorded per trial."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    jobs = [(config.to_dict(), trial) for trial in range(config.trials)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_trial_packed, jobs))
    else:
        rows = [_run_trial_packed(job) for job in jobs]
    rows.sort(key=lambda row: row["trial"])
    return ExperimentResult(config=config, rows=rows, summary=summarize(config, rows))


def summarize(config, rows):
    """Mean/median/std of every metric, per sampling budget."""
    successes = [row for row in rows if "error" not in row]
    summary = {
        "trials": len(rows),
        "failures": len(rows) - len(successes),
        "empty": len(successes) == 0,
        "per_steps": {},
    }
    for steps in config.steps:
        key = str(steps)
        reports = [row["reports"][key] for row in successes if key in row["reports"]]
        if not reports:
            summary["per_steps"][key] = {"count": 0}
            continue
        block = {"count": len(reports), "mean": {}, "median": {}, "std": {}}
        for name in MetricsReport._VALUE_FIELDS:
            values = [getattr(r, name) for r in reports]
            block["mean"][name] = statistics.fmean(values)
            block["median"][name] = statistics.median(values)
            block["std"][name] = statistics.pstdev(values) if len(values) > 1 else 0.0
        summary["per_steps"][key] = block
    return summary


def write_results(dirpath, result, resolved_config=None):
    """Write results.jsonl, summary.json, table.csv, and timing.json.

    Primary files carry no timing, so equal configurations produce
    byte-identical primary outputs; wall-clock numbers go to
    timing.json only.
    """
    os.makedirs(dirpath, exist_ok=True)
    config_doc = result.config.to_dict() if resolved_config is None else resolved_config

    lines = []
    timing_rows = []
    for row in result.rows:
        if "error" in row:
            lines.append({"trial": row["trial"], "error": row["error"]})
            continue
        for steps, report in sorted(row["reports"].items(), key=lambda kv: int(kv[0])):
            lines.append(
                {
                    "trial": row["trial"],
                    "scene_seed": row["scene_seed"],
                    "steps": int(steps),
                    **report.to_dict(),
                }
            )
            timing_rows.append(
                {"trial": row["trial"], "steps": int(steps), **report.runtime}
            )
    with open(os.path.join(dirpath, "results.jsonl"), "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")

    summary_doc = {
        "format_version": RESULTS_FORMAT_VERSION,
        "config": config_doc,
        **result.summary,
    }
    with open(os.path.join(dirpath, "summary.json"), "w") as fh:
        json.dump(summary_doc, fh, sort_keys=True, indent=1)
        fh.write("\n")

    table_fields = ["trial", "steps", *MetricsReport._VALUE_FIELDS]
    with open(os.path.join(dirpath, "table.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=table_fields, extrasaction="ignore")
        writer.writeheader()
        for line in lines:
            if "error" not in line:
                writer.writerow(line)

    with open(os.path.join(dirpath, "timing.json"), "w") as fh:
        json.dump({"rows": timing_rows}, fh, sort_keys=True, indent=1)
        fh.write("\n")
