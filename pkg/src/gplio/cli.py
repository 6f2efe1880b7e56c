"""Command line entry point: ``gplio simulate | estimate | evaluate``.

Exit codes: 0 success, 2 configuration error, 3 data error (unparsable or
unusable streams / trajectories), 4 the estimator diverged on at least one
segment (outputs are still written).

Set ``GPLIO_THREADS`` to cap the BLAS/LAPACK thread pools.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .estimator import DataError, estimate
from .sim.ate import EmptyOverlapError, ate
from .sim.io import StreamFormatError, read_streams, write_streams
from .sim.scenario import simulate
from .trajectory import TumFormatError, read_tum, write_tum

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

THREADS_ENV = "GPLIO_THREADS"

STREAMS_FILE = "streams.txt"
TRUTH_FILE = "truth.tum"

log = logging.getLogger("gplio")


def _threads():
    """Thread-pool limit from the environment (a no-op context when unset)."""
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(arg, cfg, fallback: str) -> Path:
    out = Path(arg or cfg.output or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = config_mod.load(args.config)
    try:
        sim = simulate(cfg)
    except ValueError as e:  # fault schedule outside the scenario, bad world parameters
        raise ConfigError(f"{args.config}: {e}") from None
    out = _out_dir(args.out, cfg, "sim_out")
    write_streams(out / STREAMS_FILE, sim.streams)
    truth = sim.truth_samples(cfg.duration)
    write_tum(out / TRUTH_FILE, truth.t, truth.R, truth.p)
    s = sim.streams
    report = {
        "seed": cfg.seed,
        "duration": cfg.duration,
        "samples": {"lidar": len(s.lidar), "gyro": len(s.gyro), "accel": len(s.accel)},
        "saturated": {"gyro": int(s.gyro.saturated.sum()), "accel": int(s.accel.saturated.sum())},
        "faults": sim.faults,
    }
    _write_json(out / "simulation.json", report)
    (out / "config.yaml").write_text(config_mod.dumps(cfg))
    print(f"wrote {out / STREAMS_FILE} ({len(s.lidar)} points, {len(s.gyro)} gyro, {len(s.accel)} accel samples)")
    for f in sim.faults:
        print(f"fault {f['sensor']} {f['mode']} [{f['t_start']:g}, {f['t_end']:g}) affected {f['samples']} samples")
    return EXIT_OK


def _streams_path(arg: str) -> Path:
    p = Path(arg)
    return p / STREAMS_FILE if p.is_dir() else p


def cmd_estimate(args) -> int:
    cfg = config_mod.load(args.config)
    streams = read_streams(_streams_path(args.streams))
    res = estimate(cfg, streams)
    out = _out_dir(args.out, cfg, "est_out")

    write_tum(out / "trajectory.tum", res.t, res.R, res.p)
    with open(out / "states.txt", "w") as f:
        f.write("# t wx wy wz vx vy vz " + " ".join(
            f"bg{j}x bg{j}y bg{j}z" for j in range(len(res.states[0].bg))) + " " + " ".join(
            f"ba{j}x ba{j}y ba{j}z" for j in range(len(res.states[0].ba))) + "\n")
        for st in res.states:
            vals = [*st.w, *st.v, *np.ravel(st.bg), *np.ravel(st.ba)]
            f.write(f"{st.t:.9f} " + " ".join(f"{x:.9g}" for x in vals) + "\n")
    with open(out / "diagnostics.jsonl", "w") as f:
        for rec in res.records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    report = res.report
    truth_file = Path(args.truth) if args.truth else _streams_path(args.streams).parent / TRUTH_FILE
    if truth_file.exists():
        t_ref, R_ref, p_ref = read_tum(truth_file)
        try:
            report.ate = ate(res.t, res.R, res.p, t_ref, R_ref, p_ref).as_dict()
        except EmptyOverlapError:
            log.warning("truth file %s does not overlap the estimate; ATE skipped", truth_file)
    _write_json(out / "report.json", report.as_dict())

    print(f"segments {report.segments}  wall {report.total_wall_time:.2f} s  duration {report.duration:.2f} s")
    if report.ate:
        print(f"ATE rmse {report.ate['rmse']:.4f} m  rotation {report.ate['rotation_rmse_deg']:.3f} deg")
    if report.diverged_segments:
        print(f"diverged segments: {report.diverged_segments}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    t_e, R_e, p_e = read_tum(args.est)
    t_r, R_r, p_r = read_tum(args.truth)
    res = ate(t_e, R_e, p_e, t_r, R_r, p_r, max_gap=args.max_gap)
    if args.json:
        print(json.dumps(res.as_dict(), sort_keys=True))
    else:
        print(f"pairs      {res.n_pairs}")
        print(f"ATE rmse   {res.rmse:.6f} m")
        print(f"ATE mean   {res.mean:.6f} m")
        print(f"ATE max    {res.max:.6f} m")
        print(f"rotation   {res.rotation_rmse_deg:.6f} deg (rmse)")
    if args.out:
        _write_json(Path(args.out), res.as_dict())
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gplio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate sensor streams and ground truth")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: config 'output' or ./sim_out)")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="run the sliding-window estimator on recorded streams")
    e.add_argument("config")
    e.add_argument("--streams", required=True, help="stream file or a directory holding streams.txt")
    e.add_argument("--out", help="output directory (default: config 'output' or ./est_out)")
    e.add_argument("--truth", help="TUM ground truth for the report (default: truth.tum next to the streams)")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="ATE of an estimated TUM trajectory against ground truth")
    v.add_argument("--est", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--max-gap", type=float, default=5e-3, help="timestamp association tolerance (s)")
    v.add_argument("--json", action="store_true", help="print the metrics as one JSON object")
    v.add_argument("--out", help="also write the metrics as JSON to this file")
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StreamFormatError, TumFormatError, DataError, EmptyOverlapError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
