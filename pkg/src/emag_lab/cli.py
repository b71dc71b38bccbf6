"""``emag-lab`` command line: train, sample, analyze, sweep.

Exit codes: 0 success, 2 configuration/input error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import runconfig as rc
from .combinators import GuidanceConfigError
from .diffusion import ScheduleError
from .metrics import evaluate, read_entropy_csv, write_entropy_csv
from .model import ToyModelParams, TrainingError, toy_shapes, train
from .sampler import DivergenceError, SamplerTrajectory, run_sampler
from .tensor_kernel import TrainingDivergenceError, load_csv, save_csv

log = logging.getLogger("emag_lab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
DEFAULT_OUT = "runs"


class EmptyReportError(rc.ConfigError):
    pass


def output_root(out: str | None = None) -> Path:
    return Path(out or os.environ.get("EMAG_LAB_OUT") or DEFAULT_OUT)


def _apply_seed(cfg: dict, section: str, seed: int | None) -> dict:
    if seed is None:
        return cfg
    return rc.set_dotted(cfg, f"{section}.seed", seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path, "manifest.json").read_bytes()).hexdigest()


# ---------------------------------------------------------------- train

def cmd_train(cfg: dict, out: str | None = None, seed: int | None = None) -> Path:
    """Train the toy denoiser; returns the checkpoint directory."""
    cfg = _apply_seed(cfg, "train", seed)
    rc.validate(cfg)
    model_cfg = rc.model_config(cfg)
    opts = rc.train_options(cfg)
    digest = rc.config_hash({"model": cfg.get("model", {}), "train": cfg.get("train", {})},
                            ("train", "seed"))
    run = output_root(out) / f"train-{digest[:12]}-s{opts['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    data = toy_shapes(opts["dataset_size"], seed=opts["dataset_seed"])
    result = train(data, model_cfg, steps=opts["steps"], seed=opts["seed"],
                   batch_size=opts["batch_size"], lr=opts["lr"], log_every=opts["log_every"])
    ckpt = result.params.save(run / "checkpoint", extra={"train": opts})
    with (run / "loss_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "heldout_loss"])
        for step, loss in result.losses:
            w.writerow([step, format(loss, ".17g")])
    _write_json(run / "run.json", {"kind": "train", "config_hash": digest, "seed": opts["seed"],
                                   "config": cfg, "checkpoint": "checkpoint"})
    log.info("checkpoint written to %s", ckpt)
    return ckpt


# ---------------------------------------------------------------- sample

def _labels(opts: dict) -> np.ndarray | None:
    classes = opts["classes"]
    if classes is None:
        return None
    classes = list(classes)
    if not classes:
        raise rc.ConfigError("sample.classes must be null or a non-empty list")
    return np.asarray([classes[i % len(classes)] for i in range(opts["n"])], dtype=np.int64)


def _dump_trajectory(traj: SamplerTrajectory, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, step in enumerate(traj.steps):
        files = {"x": f"step{i:04d}_x.csv", "combined": f"step{i:04d}_combined.csv"}
        save_csv(step.x, directory / files["x"])
        save_csv(step.combined, directory / files["combined"])
        for name, arr in step.preds.present().items():
            files[name] = f"step{i:04d}_{name}.csv"
            save_csv(arr, directory / files[name])
        index.append({
            "index": i, "t": step.t, "time": step.time, "in_window": step.in_window,
            "emag_active": step.emag_active,
            "selected_layer": step.selection.chosen if step.selection else None,
            "dropped_layers": list(step.dropped_layers), "files": files,
        })
    _write_json(directory / "index.json", {"steps": index})


def _write_diagnostics(traj: SamplerTrajectory, path: Path) -> None:
    g = traj.guidance
    branch = "uncond" if traj.labels is None else "cond"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "branch", "layer", "delta", "chosen_layer", "lam", "beta"])
    for step in traj.steps:
        if step.selection is None:
            continue
        for layer, delta in sorted(step.selection.deltas.items()):
            w.writerow([step.t, branch, layer, format(delta, ".17g"), step.selection.chosen,
                        g.lam, g.beta])
    path.write_text(buf.getvalue())


def entropy_rows(traj: SamplerTrajectory) -> list[tuple[int, int, float]]:
    """(step index along the reverse process, layer, mean entropy in nats)."""
    return [(i, layer, v) for i, step in enumerate(traj.steps) for layer, v in sorted(step.entropy.items())]


def cmd_sample(cfg: dict, out: str | None = None, seed: int | None = None) -> Path:
    """Sample with the configured guidance; returns the run directory."""
    cfg = _apply_seed(cfg, "sample", seed)
    rc.validate(cfg)
    model_section = cfg.get("model", {})
    if "checkpoint" not in model_section:
        raise rc.ConfigError("missing required key 'checkpoint' in section 'model'")
    ckpt_path = Path(model_section["checkpoint"])
    if not (ckpt_path / "manifest.json").exists():
        raise rc.ConfigError(f"checkpoint not found: {ckpt_path}")
    params = ToyModelParams.load(ckpt_path)
    weak = None
    extra = _checkpoint_digest(ckpt_path)
    if "weak_checkpoint" in model_section:
        weak = ToyModelParams.load(model_section["weak_checkpoint"])
        extra += _checkpoint_digest(model_section["weak_checkpoint"])
    try:
        schedule = rc.schedule_from(cfg, params.config)
    except ScheduleError as exc:
        raise rc.ConfigError(str(exc)) from exc
    guidance = rc.guidance_config(cfg, schedule.T)
    opts = rc.sample_options(cfg)
    labels = _labels(opts)
    hashed = rc.set_dotted(cfg, "model.checkpoint", None)
    hashed = rc.set_dotted(hashed, "model.weak_checkpoint", None)
    digest = rc.config_hash(hashed, ("sample", "seed"), extra)
    run = output_root(out) / f"sample-{digest[:12]}-s{opts['seed']}"
    run.mkdir(parents=True, exist_ok=True)
    try:
        traj = run_sampler(params, guidance, schedule, opts["seed"], labels=labels, n=opts["n"],
                           weak_params=weak)
    except (ScheduleError, GuidanceConfigError) as exc:
        raise rc.ConfigError(str(exc)) from exc
    save_csv(traj.final, run / "samples.csv")
    if labels is not None:
        save_csv(labels.astype(np.float64), run / "labels.csv")
    _write_diagnostics(traj, run / "diagnostics.csv")
    write_entropy_csv(entropy_rows(traj), run / "entropy.csv")
    if opts["dump_trajectory"]:
        _dump_trajectory(traj, run / "trajectory")
    manifest = {
        "kind": "sample", "config_hash": digest, "seed": opts["seed"],
        "schedule": schedule.to_dict(), "checkpoint": str(ckpt_path),
        "guidance": guidance.to_dict(),
        "window": dict(guidance.resolved_window(schedule.T).__dict__),
        "metrics": rc.metrics_options(cfg),
        "outputs": {"samples": "samples.csv", "labels": "labels.csv" if labels is not None else None,
                    "diagnostics": "diagnostics.csv", "entropy": "entropy.csv",
                    "trajectory": "trajectory/index.json" if opts["dump_trajectory"] else None},
        "n_model_calls": traj.n_model_calls,
        "config": cfg,
    }
    _write_json(run / "manifest.json", manifest)
    return run


# ---------------------------------------------------------------- analyze

def analyze_run(run: str | Path, out: str | Path | None = None):
    run = Path(run)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists() or not (run / "samples.csv").exists():
        raise EmptyReportError(f"{run}: no sampled trajectories to analyze")
    manifest = json.loads(manifest_path.read_text())
    fake = load_csv(run / "samples.csv")
    if fake.size == 0:
        raise EmptyReportError(f"{run}: empty sample set")
    m = manifest.get("metrics", rc.METRICS_DEFAULTS)
    labels_file = run / "labels.csv"
    if labels_file.exists():
        labels = load_csv(labels_file).astype(np.int64)
        classes = np.asarray([labels[i % len(labels)] for i in range(m["reference_n"])])
    else:
        classes = None
    real, _ = toy_shapes(m["reference_n"], seed=m["reference_seed"], classes=classes)
    trace = read_entropy_csv(run / "entropy.csv") if (run / "entropy.csv").exists() else []
    report = evaluate(real.reshape(len(real), -1), fake.reshape(len(fake), -1), k=m["k"],
                      entropy_trace=trace)
    report.write(Path(out) if out else run / "analysis")
    return report


def cmd_analyze(runs: list[str | Path], out: str | None = None):
    if not runs:
        raise EmptyReportError("no run directories given")
    reports = []
    for r in runs:
        target = None if out is None else Path(out) / Path(r).name
        reports.append(analyze_run(r, target))
    return reports


# ---------------------------------------------------------------- sweep

def _sweep_point(args):
    cfg, out = args
    run = cmd_sample(cfg, out)
    report = analyze_run(run)
    return str(run), json.loads((run / "manifest.json").read_text())["config_hash"], report


def cmd_sweep(cfg: dict, out: str | None = None, seed: int | None = None, jobs: int = 1) -> Path:
    """Run every grid point (sample + analyze) and write one table row per point."""
    cfg = _apply_seed(cfg, "sample", seed)
    rc.validate(cfg)
    grid = cfg.get("sweep", {}).get("grid")
    if not grid or not isinstance(grid, dict):
        raise rc.ConfigError("sweep.grid must map dotted config keys to value lists")
    keys = list(grid)
    points = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = {k: v for k, v in cfg.items() if k != "sweep"}
        for k, v in zip(keys, values):
            point = rc.set_dotted(point, k, v)
        rc.validate(point)
        points.append((values, point))
    work = [(p, out) for _, p in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, work))
    else:
        results = [_sweep_point(w) for w in work]
    digest = rc.config_hash(cfg, ("sample", "seed"), rc.canonical_json(grid))
    seed_val = rc.sample_options(cfg)["seed"]
    sweep_dir = output_root(out) / f"sweep-{digest[:12]}-s{seed_val}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "config_hash", *keys, "frechet", "precision", "recall", "density",
                "coverage", "run_dir"])
    for i, ((values, _), (run, h, rep)) in enumerate(zip(points, results)):
        w.writerow([i, h, *[json.dumps(v) for v in values], format(rep.frechet, ".17g"),
                    format(rep.precision, ".17g"), format(rep.recall, ".17g"),
                    format(rep.density, ".17g"), format(rep.coverage, ".17g"), Path(run).name])
    (sweep_dir / "table.csv").write_text(buf.getvalue())
    return sweep_dir / "table.csv"


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emag-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "sample", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name != "train":
            s.add_argument("--checkpoint", help="override model.checkpoint")
        if name == "sweep":
            s.add_argument("--jobs", type=int, default=1)
    a = sub.add_parser("analyze")
    a.add_argument("runs", nargs="*")
    a.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            for rep in cmd_analyze(args.runs, args.out):
                print(rep.to_json(), end="")
            return EXIT_OK
        cfg = rc.load_config(args.config)
        if getattr(args, "checkpoint", None):
            cfg = rc.set_dotted(cfg, "model.checkpoint", args.checkpoint)
        if args.command == "train":
            print(cmd_train(cfg, args.out, args.seed))
        elif args.command == "sample":
            print(cmd_sample(cfg, args.out, args.seed))
        else:
            print(cmd_sweep(cfg, args.out, args.seed, args.jobs))
    except (rc.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TrainingError, TrainingDivergenceError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
