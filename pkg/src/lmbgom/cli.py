"""Command-line entry point: ``run``, ``simulate`` and ``ospa`` subcommands."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .harness import (
    FILTERS,
    OSPA_HEADER,
    ConfigError,
    ExperimentFailed,
    bundled_scenarios,
    generate_truth,
    resolve_config,
    run_experiment,
    with_overrides,
    write_outputs,
    write_truth,
)
from .metrics import OspaParams, ospa
from .sensors import write_frame_csv, write_pgm
from .smc import RandomStream


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmbgom", description="Labeled multi-object trackers under generic observation models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo experiment and write CSV outputs")
    run.add_argument("--config", required=True, help="scenario file, or the name of a bundled scenario")
    run.add_argument("--filter", choices=FILTERS, help="override the scenario's filter")
    run.add_argument("--particles", type=_positive, help="override particles per hypothesis")
    run.add_argument("--runs", type=_positive, help="override the number of Monte-Carlo runs")
    run.add_argument("--seed", type=_u64, help="override the experiment seed")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--threads", type=_positive, default=1, help="worker processes for Monte-Carlo runs")

    sim = sub.add_parser("simulate", help="write ground truth and sensor frames only")
    sim.add_argument("--config", required=True)
    sim.add_argument("--runs", type=_positive)
    sim.add_argument("--seed", type=_u64)
    sim.add_argument("--out", required=True)
    sim.add_argument("--format", choices=("csv", "pgm"), default="csv", help="frame file format")

    sc = sub.add_parser("ospa", help="score a tracks.jsonl file against a truth.jsonl file")
    sc.add_argument("estimates")
    sc.add_argument("truth")
    sc.add_argument("--cutoff", type=float, default=30.0)
    sc.add_argument("--order", type=float, default=1.0)
    sc.add_argument("--out", help="write the CSV here instead of stdout")

    sub.add_parser("scenarios", help="list bundled scenarios")
    return parser


def cmd_run(args) -> int:
    config = with_overrides(resolve_config(args.config), args.filter, args.particles, args.runs, args.seed)
    result = run_experiment(config, threads=args.threads, out_dir=args.out)
    for path in write_outputs(result, args.out):
        logging.info("wrote %s", path)
    s = result.summary()
    print(f"{config.name} [{config.filter}] runs={s['runs']} failed={s['failed_runs']} post-transient OSPA={s['post_transient_mean_ospa_m']:.3f} m")
    return 0


def cmd_simulate(args) -> int:
    config = with_overrides(resolve_config(args.config), runs=args.runs, seed=args.seed)
    out = Path(args.out)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    sensor = config.sensor.build()
    if args.format == "pgm" and config.sensor.kind != "tbd":
        raise ConfigError("PGM frames need a TBD sensor")
    for r in range(config.runs):
        stream = RandomStream(config.seed).child("run", r)
        truth = generate_truth(config, stream.child("truth"))
        for k in range(1, config.duration + 1):
            X = np.array([x for _, x in truth[k]]).reshape(-1, 4)
            frame = sensor.sample_frame(X, stream.child("frame", k).generator(), step=k)
            stem = frames / f"run{r:03d}_frame_{k:04d}"
            if args.format == "pgm":
                write_pgm(frame, sensor.grid, stem.with_suffix(".pgm"))
            else:
                write_frame_csv(frame, sensor, stem.with_suffix(".csv"))
    write_truth(config, out)
    (out / "config.json").write_text(config.to_json() + "\n")
    print(f"wrote {config.runs * config.duration} frames to {frames}")
    return 0


def _read_jsonl(path) -> list[dict]:
    try:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_ospa(args) -> int:
    params = OspaParams(args.cutoff, args.order)
    est = {(r["run"], r["step"]): [t["position"] for t in r["tracks"] if t.get("extracted", True)] for r in _read_jsonl(args.estimates)}
    truth = {(r["run"], r["step"]): [o["state"][:2] for o in r["objects"]] for r in _read_jsonl(args.truth)}
    per_step = defaultdict(list)
    for key in sorted(set(est) | set(truth)):
        per_step[key[1]].append(ospa(np.reshape(est.get(key, []), (-1, 2)), np.reshape(truth.get(key, []), (-1, 2)), params))
    lines = [OSPA_HEADER]
    for step, vals in sorted(per_step.items()):
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        lines.append(f"{step},{np.mean(vals):.6f},{se:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "ospa":
            return cmd_ospa(args)
        print("\n".join(bundled_scenarios()))
        return 0
    except (ConfigError, ExperimentFailed, OSError, ValueError) as exc:
        print(f"lmbgom: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
