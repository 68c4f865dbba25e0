"""Command-line entry point: simulate, run, eval, bench-marg.

Outputs are files (delimited data plus rendered figures) under the chosen
output directory; the effective configuration is echoed there for
provenance. Exit codes: 0 success, 1 estimation divergence, 2 usage or
configuration error, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import logging
import os
import sys
import time

import numpy as np
import yaml

from . import config as cfg_mod
from . import estimator as est_mod
from . import evaluate as ev
from . import io as io_mod
from . import marginalization as marg
from . import report
from . import simulate as sim
from .errors import ConfigError, DvioError, InvalidSpec, NoMatches

log = logging.getLogger("dvio")

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def _setup_logging():
    level = os.environ.get("DVIO_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="[%(levelname)s] %(message)s")


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s != ""]
    except ValueError:
        raise ConfigError(f"invalid seed list {text!r}")


def _load_run_config(args) -> cfg_mod.RunConfig:
    config = cfg_mod.load_config(args.config, getattr(args, "preset", None))
    if getattr(args, "mode", None):
        config.estimator.mode = args.mode
    if getattr(args, "out", None):
        config.out_dir = args.out
    return config


# ------------------------------------------------------------------ simulate

def _simulate_one(config: cfg_mod.RunConfig, out_dir: str) -> str:
    config.validate()
    dataset = sim.generate_dataset(config.trajectory, config.scene, config.noise)
    io_mod.export_dataset(dataset, out_dir)
    cfg_mod.save_config(config, os.path.join(out_dir, "config.yaml"))
    report.trajectory_figure(os.path.join(out_dir, "dataset.png"),
                             gt=dataset.ground_truth, landmarks=dataset.landmarks,
                             title="simulated sequence")
    summary = (f"{out_dir}: keyframes={dataset.keyframe_count()} "
               f"landmarks={dataset.landmarks.shape[0]} "
               f"observations={len(dataset.observations)} "
               f"holes={dataset.hole_fraction():.3f}")
    return summary


def _simulate_worker(config_yaml: str, seed: int, out_dir: str) -> str:
    config = cfg_mod.RunConfig()
    cfg_mod.update_from_dict(config, yaml.safe_load(config_yaml))
    config.apply_seed(seed)
    return _simulate_one(config, out_dir)


def cmd_simulate(args) -> int:
    config = _load_run_config(args)
    seeds = _parse_seeds(args.seed) if args.seed else [config.seed]
    if len(seeds) == 1:
        config.apply_seed(seeds[0])
        print(_simulate_one(config, config.out_dir))
        return EXIT_OK

    jobs = [(yaml.safe_dump(cfg_mod.config_as_dict(config)), s,
             os.path.join(config.out_dir, f"seed-{s:03d}")) for s in seeds]
    if args.parallel:
        with concurrent.futures.ProcessPoolExecutor() as pool:
            for summary in pool.map(_simulate_worker, *zip(*jobs)):
                print(summary)
    else:
        for job in jobs:
            print(_simulate_worker(*job))
    return EXIT_OK


# ----------------------------------------------------------------------- run

def _run_one(dataset_dir: str, config: cfg_mod.RunConfig, out_dir: str):
    dataset = io_mod.import_dataset(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    trajectory, window, run_report = est_mod.run_estimator(dataset, config.estimator)
    elapsed = time.perf_counter() - t0

    io_mod.write_tum(os.path.join(out_dir, "estimate.tum"), trajectory)
    with open(os.path.join(out_dir, "cost_trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["keyframe", "iterations", "initial_cost", "final_cost",
                    "termination"])
        for k, rep in enumerate(run_report.solve_reports, start=1):
            w.writerow([k, rep.iterations, repr(rep.initial_cost),
                        repr(rep.final_cost), rep.termination])
    summary = {
        "mode": config.estimator.mode,
        "keyframes": len(trajectory),
        "diverged": run_report.diverged,
        "failed_at": run_report.failed_at,
        "error": run_report.error,
        "elapsed_seconds": round(elapsed, 3),
    }
    if config.estimator.estimate_time_offset:
        summary["estimated_time_offset"] = float(window.time_offset)
        if run_report.time_offset_trace:
            report.time_offset_figure(os.path.join(out_dir, "time_offset.png"),
                                      run_report.time_offset_trace)
    with open(os.path.join(out_dir, "run_report.yaml"), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=True)
    cfg_mod.save_config(config, os.path.join(out_dir, "config.yaml"))

    report.trajectory_figure(os.path.join(out_dir, "trajectory.png"),
                             gt=dataset.ground_truth, est=trajectory,
                             landmarks=dataset.landmarks,
                             title=f"{config.estimator.mode}")
    if run_report.solve_reports:
        report.cost_trace_figure(os.path.join(out_dir, "cost_trace.png"),
                                 [r.final_cost for r in run_report.solve_reports])
    try:
        ev.write_per_frame_errors_csv(os.path.join(out_dir, "per_frame_errors.csv"),
                                      dataset.ground_truth, trajectory)
    except (NoMatches, DvioError):
        pass
    return run_report, summary


def _run_worker(dataset_dir: str, config_yaml: str, out_dir: str):
    config = cfg_mod.RunConfig()
    cfg_mod.update_from_dict(config, yaml.safe_load(config_yaml))
    run_report, summary = _run_one(dataset_dir, config, out_dir)
    return dataset_dir, run_report.diverged, run_report.failed_at, summary


def cmd_run(args) -> int:
    config = _load_run_config(args)
    if args.seed:
        config.apply_seed(_parse_seeds(args.seed)[0])
    datasets = args.dataset
    status = EXIT_OK
    if len(datasets) == 1:
        run_report, summary = _run_one(datasets[0], config, config.out_dir)
        print(yaml.safe_dump(summary, sort_keys=True).strip())
        if run_report.diverged:
            log.error("estimation diverged at keyframe %s: %s",
                      run_report.failed_at, run_report.error)
            status = EXIT_DIVERGED
        return status

    config_yaml = yaml.safe_dump(cfg_mod.config_as_dict(config))
    jobs = [(d, config_yaml, os.path.join(config.out_dir, os.path.basename(d.rstrip("/"))))
            for d in datasets]
    results = []
    if args.parallel:
        with concurrent.futures.ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_worker, *zip(*jobs)))
    else:
        results = [_run_worker(*job) for job in jobs]
    for dataset_dir, diverged, failed_at, summary in results:
        print(f"{dataset_dir}: diverged={diverged} failed_at={failed_at}")
        if diverged:
            status = EXIT_DIVERGED
    return status


# ---------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    gt = io_mod.read_tum(args.ground_truth)
    est = io_mod.read_tum(args.estimate)
    ate = ev.ate_rmse(gt, est)
    rpe = ev.rpe_rmse(gt, est)
    pairs = ev.associate(gt, est, ev.default_max_dt(gt))
    print("sequence,mode,ate_rmse,rpe_rmse,n_frames")
    row = (os.path.basename(args.estimate), args.mode or "unknown",
           ate, rpe, len(pairs))
    print(",".join(str(x) for x in row))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ev.write_metrics_csv(os.path.join(args.out, "metrics.csv"), [row])
        ev.write_per_frame_errors_csv(os.path.join(args.out, "per_frame_errors.csv"),
                                      gt, est)
        report.trajectory_figure(os.path.join(args.out, "trajectory.png"),
                                 gt=gt, est=est, title="evaluation")
        S = ev.align_rigid(gt, est, pairs)
        errors = ev.translation_errors(gt, est, pairs, S)
        report.error_curve_figure(os.path.join(args.out, "ate_errors.png"),
                                  [gt[i][0] for i, _ in pairs],
                                  np.linalg.norm(errors, axis=1),
                                  title=f"ATE RMSE {ate:.4g} m")
    return EXIT_OK


# ---------------------------------------------------------------- bench-marg

def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    try:
        for part in text.split(","):
            k, l = part.split(":")
            sizes.append((int(k), int(l)))
    except ValueError:
        raise ConfigError(f"invalid sizes {text!r}; expected K:L[,K:L...]")
    return sizes


def bench_marginalization(sizes, modes, repetitions: int, seed: int = 0):
    """Timed fast-vs-dense comparison; equivalence verified on every
    instance before timing (correctness precedes speed)."""
    rows = []
    for mode in modes:
        for K, L in sizes:
            rng = np.random.default_rng(seed)
            fast_times = []
            dense_times = []
            for _ in range(repetitions):
                system, drop = marg.synthetic_system(K, L, mode, rng)
                ordered = marg.reorder_for_marginalization(system, drop)

                t0 = time.perf_counter()
                fast = marg.marginalize_nav_block(marg.marginalize_landmarks(ordered, mode))
                fast_times.append(time.perf_counter() - t0)

                t0 = time.perf_counter()
                dense = marg.dense_schur_oracle(system, drop)
                dense_times.append(time.perf_counter() - t0)

                h_err = np.linalg.norm(fast.H - dense.H) / max(1.0, np.linalg.norm(dense.H))
                b_err = np.linalg.norm(fast.b - dense.b) / max(1.0, np.linalg.norm(dense.b))
                if h_err > 1e-9 or b_err > 1e-9:
                    raise DvioError(
                        f"fast/dense equivalence violated at K={K} L={L} mode={mode}: "
                        f"H err {h_err:.2e}, b err {b_err:.2e}")
            fast_ms = float(np.median(fast_times) * 1e3)
            dense_ms = float(np.median(dense_times) * 1e3)
            rows.append((mode, K, L, fast_ms, dense_ms, dense_ms / fast_ms))
            log.info("bench %s K=%d L=%d: fast %.3f ms dense %.3f ms speedup %.2fx",
                     mode, K, L, fast_ms, dense_ms, dense_ms / fast_ms)
    return rows


def cmd_bench_marg(args) -> int:
    sizes = _parse_sizes(args.sizes)
    modes = ["1d", "3d"] if args.mode == "both" else [args.mode]
    seed = _parse_seeds(args.seed)[0] if args.seed else 0
    rows = bench_marginalization(sizes, modes, args.repetitions, seed)
    print("mode,K,L,fast_ms,dense_ms,speedup")
    for row in rows:
        print(f"{row[0]},{row[1]},{row[2]},{row[3]:.4f},{row[4]:.4f},{row[5]:.3f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "benchmark.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mode", "K", "L", "fast_ms", "dense_ms", "speedup"])
            for row in rows:
                w.writerow(row)
        report.benchmark_figure(os.path.join(args.out, "benchmark.png"), rows)
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvio",
        description="depth-aided visual-inertial odometry: simulate, estimate, "
                    "evaluate, benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=sorted(cfg_mod.PRESETS),
                   help="named dataset preset")
    p.add_argument("--seed", help="seed or comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--parallel", action="store_true",
                   help="generate multiple seeds concurrently")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("run", help="run the estimator over a dataset")
    p.add_argument("dataset", nargs="+", help="dataset directory (one or more)")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=sorted(cfg_mod.PRESETS))
    p.add_argument("--mode", choices=est_mod.MODES)
    p.add_argument("--seed", help="estimator seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--parallel", action="store_true",
                   help="process multiple datasets concurrently")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="compute ATE/RPE between two TUM files")
    p.add_argument("ground_truth")
    p.add_argument("estimate")
    p.add_argument("--mode", help="label recorded in the metrics table")
    p.add_argument("--out", help="directory for metrics, per-frame errors, figures")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-marg", help="benchmark fast vs dense marginalization")
    p.add_argument("--sizes", default="10:150", help="comma list of K:L sizes")
    p.add_argument("--mode", choices=["1d", "3d", "both"], default="both")
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--seed", help="generator seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_bench_marg)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, InvalidSpec, NoMatches, OSError, ValueError) as err:
        log.error("%s", err)
        return EXIT_USAGE
    except DvioError as err:
        log.error("internal invariant violation: %s", err)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
