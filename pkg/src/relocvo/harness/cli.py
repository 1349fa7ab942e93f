"""``relocvo`` command line: gen, map, run, eval, sweep."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from ..errors import ConfigurationError, RelocVOError
from ..reloc import MapDatabase
from ..tum import read_tum
from .config import load_config, write_config
from .experiment import evaluate_run, evaluate_trajectories, summarize, sweep, write_sweep
from .metrics import emit_report
from .pipeline import MODES, run_pipeline
from .store import load_sequence, save_sequence, write_run
from .world import generate, generate_map

EXIT_OK, EXIT_CONFIG, EXIT_LOST, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("relocvo")


def _common(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")


def _config(args, fallback=None):
    path = args.config
    if path is None and fallback is not None and os.path.exists(fallback):
        path = fallback
    return load_config(path, args.overrides)


def cmd_gen(args):
    cfg = _config(args)
    seq, db, _ = generate(cfg.sequence, cfg.run.world_seed, cfg.noise_seed)
    save_sequence(seq, args.out)
    db.save(os.path.join(args.out, "map"))
    write_config(os.path.join(args.out, "config.txt"), cfg)
    log.info("wrote %d frames and %d map keyframes to %s", seq.n_frames, len(db), args.out)
    return EXIT_OK


def cmd_map(args):
    cfg = _config(args)
    db = generate_map(cfg.sequence, cfg.run.world_seed, cfg.noise_seed)
    db.save(args.out)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    log.info("wrote %d map keyframes to %s", len(db), args.out)
    return EXIT_OK


def cmd_run(args):
    if args.mode is not None:
        args.overrides.insert(0, f"run.mode={args.mode}")
    if args.no_fusion:
        args.overrides.insert(0, "run.fusion=false")
    cfg = _config(args, os.path.join(args.sequence, "config.txt"))
    seq = load_sequence(args.sequence, cfg.sequence)
    db = MapDatabase.load(args.map or os.path.join(args.sequence, "map"))
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    res = run_pipeline(seq, db, cfg.run.mode, cfg.run.fusion, cfg.pipeline())
    write_run(args.out, res)
    if len(res.odometry) > cfg.eval.interval:
        for name, report in evaluate_run(res, seq, cfg.eval.interval, cfg.eval.alignment).items():
            emit_report(report, args.out, prefix=f"{name}_")
    if not res.complete:
        log.error("%s; partial trajectories written to %s", res.message, args.out)
        return EXIT_LOST
    log.info("%s run over %d keyframes written to %s", res.mode, len(res.odometry), args.out)
    return EXIT_OK


def _by_time(entries, reference):
    lookup = {round(t, 6): k for k, (t, _) in enumerate(reference)}
    out = {}
    for t, pose in entries:
        k = lookup.get(round(t, 6))
        if k is not None:
            out[k] = pose
    return out


def cmd_eval(args):
    cfg = _config(args)
    gt_entries = read_tum(args.groundtruth)
    gt = {k: p for k, (_, p) in enumerate(gt_entries)}
    est = _by_time(read_tum(args.estimate), gt_entries)
    if not est:
        raise ConfigurationError("no estimate pose matches a ground-truth timestamp")
    reports = evaluate_trajectories(est, gt, None, None, cfg.eval.interval, cfg.eval.alignment)
    paths = emit_report(reports["odometry"], args.out)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    log.info("metrics written to %s", ", ".join(paths.values()))
    return EXIT_OK


def _seeds(text):
    if "-" in text:
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    if "," in text:
        return [int(s) for s in text.split(",")]
    return list(range(int(text)))


def cmd_sweep(args):
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    try:
        seeds = _seeds(args.seeds)
    except ValueError:
        raise ConfigurationError(f"cannot read seeds {args.seeds!r}; use N, A-B or A,B,C") from None

    def progress(o):
        log.info("seed %d: rpe %s", o.seed, " ".join(f"{m}={o.rpe[m]:.4f}" for m in MODES))

    outcomes = sweep(cfg, seeds, progress)
    write_sweep(os.path.join(args.out, "sweep.csv"), outcomes)
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write("metric,value\n")
        for k, v in summarize(outcomes).items():
            fh.write(f"{k},{v:.12g}\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="relocvo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic sequence and its map database")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("map", help="build only the map database")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("run", help="run the pipeline on a generated sequence")
    _common(p)
    p.add_argument("--sequence", required=True, help="directory written by gen")
    p.add_argument("--map", help="map database directory (default: <sequence>/map)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="RPE/ATE of a TUM trajectory against ground truth")
    _common(p)
    p.add_argument("--estimate", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="all modes over several seeds")
    _common(p)
    p.add_argument("--seeds", default="20", help="N (0..N-1), A-B or A,B,C")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"relocvo: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"relocvo: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except RelocVOError as err:
        print(f"relocvo: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
