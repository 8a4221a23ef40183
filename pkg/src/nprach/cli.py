"""Command line front door: simulate / calibrate / train / eval / report."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .baseline import calibrate_threshold
from .bench import (BaselineBatchDetector, NeuralBatchDetector,
                    read_metrics_csv, run_experiment, write_metrics_csv)
from .configio import ConfigBundle, default_bundle, load_config
from .frontend import demodulate_grid, save_grid
from .neural import SynchModel, load_checkpoint, save_checkpoint, train
from .preamble import build_all_patterns
from .scenario import sample_scenario, save_scenario, synthesize_received


def _bundle(args) -> ConfigBundle:
    if args.config is not None:
        return load_config(args.config)
    return default_bundle()


def cmd_simulate(args) -> int:
    """Dump scenario + grid files for offline inspection."""
    bundle = _bundle(args)
    cfg = bundle.preamble
    patterns = build_all_patterns(cfg)
    exp = bundle.experiment
    seed = args.seed if args.seed is not None else exp.seed
    os.makedirs(args.out, exist_ok=True)
    for trial in range(args.trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
        scenario = sample_scenario(rng, cfg, args.p_active, args.cfo_max_ppm,
                                   exp.toa_max, exp.snr_range_db,
                                   bundle.profile)
        stream = synthesize_received(scenario, patterns, cfg, rng=rng,
                                     dtype=np.complex64)
        save_scenario(os.path.join(args.out, f"scenario_{trial:04d}.bin"),
                      scenario, stream, cfg)
        save_grid(os.path.join(args.out, f"grid_{trial:04d}.bin"),
                  demodulate_grid(stream, cfg, dtype=np.complex64), cfg)
    print(f"wrote {args.trials} scenario/grid pairs to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    """Calibrate the baseline threshold against noise-only grids."""
    bundle = _bundle(args)
    seed = args.seed if args.seed is not None else 0
    trials = args.trials if args.trials is not None else bundle.calib_trials
    gamma = calibrate_threshold(bundle.preamble, bundle.baseline,
                                n_trials=trials, seed=seed)
    print(f"gamma = {gamma:.10g}  (target_fa {bundle.baseline.target_fa:g}, "
          f"{trials} noise trials)")
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(f"{gamma:.10g}\n")
    return 0


def cmd_train(args) -> int:
    """Train the neural synchronizer and write a checkpoint."""
    bundle = _bundle(args)
    tc = bundle.train
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    cfg = bundle.preamble
    patterns = build_all_patterns(cfg)
    model = SynchModel(bundle.model, sg_count=cfg.sg_count, seed=tc.seed)

    def log(rec):
        if args.log_every and (rec.step % args.log_every == 0
                               or rec.step == tc.steps - 1):
            print(f"step {rec.step + 1}/{tc.steps}  loss {rec.loss_total:.4f}  "
                  f"(det {rec.loss_detection:.4f} est {rec.loss_estimation:.4f})",
                  flush=True)
        if args.save_every and (rec.step + 1) % args.save_every == 0:
            # atomic replace so an interrupted run always leaves a loadable file
            save_checkpoint(args.out + ".tmp", model)
            os.replace(args.out + ".tmp", args.out)

    trace = train(model, tc, cfg, patterns, log=log)
    save_checkpoint(args.out, model)
    print(f"wrote checkpoint {args.out} ({tc.steps} steps)")
    if args.trace is not None:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_detection", "loss_estimation",
                             "loss_total"])
            for rec in trace:
                writer.writerow([rec.step, f"{rec.loss_detection:.10g}",
                                 f"{rec.loss_estimation:.10g}",
                                 f"{rec.loss_total:.10g}"])
        print(f"wrote loss trace {args.trace}")
    return 0


def cmd_eval(args) -> int:
    """Run the benchmark sweep for the selected detectors."""
    bundle = _bundle(args)
    cfg = bundle.preamble
    patterns = build_all_patterns(cfg)
    exp = bundle.experiment
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    if args.trials is not None:
        exp = replace(exp, n_trials=args.trials)

    detectors = {}
    if args.detector in ("neural", "both"):
        ckpt = args.checkpoint if args.checkpoint is not None else bundle.checkpoint
        if ckpt is None:
            raise ValueError("neural detector requested but no checkpoint "
                             "given (--checkpoint or [model] checkpoint)")
        detectors["neural"] = NeuralBatchDetector(cfg, patterns,
                                                  load_checkpoint(ckpt))
    if args.detector in ("baseline", "both"):
        bl = bundle.baseline
        gamma = args.gamma if args.gamma is not None else bl.gamma
        if gamma is None:
            print(f"calibrating baseline threshold "
                  f"({bundle.calib_trials} noise trials)...", flush=True)
            gamma = calibrate_threshold(cfg, bl, n_trials=bundle.calib_trials,
                                        seed=exp.seed)
            print(f"gamma = {gamma:.10g}")
        detectors["baseline"] = BaselineBatchDetector(
            cfg, patterns, replace(bl, gamma=gamma))

    rows = run_experiment(exp, detectors, cfg, workers=args.workers)
    write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    for row in rows:
        if row.snr_bin == "all":
            print(f"{row.detector:>8s}  cfo<={row.cfo_max_ppm:g}ppm "
                  f"p={row.p_active:g}  fnr {row.fnr:.4f}  fpr {row.fpr:.5f}  "
                  f"toa_rmse {row.toa_rmse_us:.3f}us  "
                  f"cfo_rmse {row.cfo_rmse_ppm:.3f}ppm")
    return 0


def cmd_report(args) -> int:
    """Merge metrics tables into one file."""
    rows = []
    for path in args.inputs:
        rows.extend(read_metrics_csv(path))
    write_metrics_csv(args.out, rows)
    print(f"merged {len(args.inputs)} tables ({len(rows)} rows) into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nprach",
        description="NPRACH simulation and synchronization benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("simulate", help="dump scenario and grid files")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trials", type=int, default=16)
    p.add_argument("--p-active", type=float, default=0.5)
    p.add_argument("--cfo-max-ppm", type=float, default=10.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="calibrate the baseline threshold")
    common(p)
    p.add_argument("--out", help="write the threshold to this file")
    p.add_argument("--trials", type=int, help="noise trials (default from config)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train the neural synchronizer")
    common(p)
    p.add_argument("--out", default="nprach_model.ckpt", help="checkpoint path")
    p.add_argument("--steps", type=int, help="override [train] steps")
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.add_argument("--log-every", type=int, default=100,
                   help="progress print interval, 0 = silent")
    p.add_argument("--save-every", type=int, default=0,
                   help="checkpoint every N steps as well, 0 = only at the end")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the benchmark sweep")
    common(p)
    p.add_argument("--out", default="metrics.csv", help="metrics CSV path")
    p.add_argument("--detector", choices=("baseline", "neural", "both"),
                   default="both")
    p.add_argument("--checkpoint", help="neural checkpoint path")
    p.add_argument("--gamma", type=float, help="baseline threshold override")
    p.add_argument("--trials", type=int, help="override [experiment] n_trials")
    p.add_argument("--workers", type=int,
                   help="worker processes (default NPRACH_WORKERS or 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge metrics tables")
    p.add_argument("inputs", nargs="+", help="metrics CSV files")
    p.add_argument("--out", required=True, help="merged CSV path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, NotImplementedError,
            RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
