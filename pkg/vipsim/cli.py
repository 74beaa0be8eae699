"""Command-line interface: ``vipsim <command> [options]``.

Every command reads and writes the on-disk formats of `vipsim.io`,
`vipsim.eventsel`, `vipsim.calib`, `vipsim.analysis` and `vipsim.limits`,
so any stage of `vipsim.pipeline` can be rerun on its own.
"""

import argparse
import dataclasses
import logging
import os
import sys

from vipsim import __version__, analysis, limits, pipeline
from vipsim.config import load_config
from vipsim.exceptions import PipelineError, VipsimError
from vipsim.model import RunConfig
from vipsim.runner import executor_for
from vipsim.utils import dumps_json

logger = logging.getLogger("vipsim.cli")

DATA_DIR_ENV = "VIPSIM_DATA_DIR"
_MODES = {"on": "current_on", "off": "current_off", "calibration": "calibration"}


def _configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    handlers = [logging.StreamHandler(sys.stderr)]
    if args.log_file:
        handlers.append(logging.FileHandler(args.log_file, encoding="utf-8"))
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def _load(args):
    """The config named by ``--config`` (defaults without one) with CLI overrides."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run=cfg.run.replace(rng_seed=args.seed))
    if getattr(args, "beta2", None) is not None:
        cfg = cfg.replace(sources=cfg.sources.replace(injected_beta2_over_2=args.beta2))
    if getattr(args, "workers", None) is not None:
        cfg = cfg.replace(simulation=dataclasses.replace(cfg.simulation, workers=args.workers))
    return cfg


def _out(args, default_name):
    """``--out``, or ``default_name`` inside ``$VIPSIM_DATA_DIR``."""
    if args.out:
        return args.out
    data_dir = os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise VipsimError(f"--out is required when ${DATA_DIR_ENV} is not set")
    return os.path.join(data_dir, default_name)


def cmd_simulate(args):
    cfg = _load(args)
    mode = _MODES[args.mode]
    executor = executor_for(cfg.simulation.workers)
    try:
        frame_dir, _ = pipeline.simulate_stage(cfg, mode, _out(args, "frames"), executor=executor)
    finally:
        executor.shutdown(wait=True)
    print(frame_dir)


def cmd_select(args):
    cfg = _load(args)
    executor = executor_for(cfg.simulation.workers)
    try:
        events = pipeline.select_stage(cfg, args.input, _out(args, "events.csv"), executor=executor)
    finally:
        executor.shutdown(wait=True)
    print(f"{len(events)} events")


def cmd_calibrate(args):
    cfg = _load(args)
    labels = [s.strip() for s in args.lines.split(",") if s.strip()] if args.lines else None
    calibration = pipeline.calibrate_stage(cfg, args.events, _out(args, "calib.json"), labels)
    print(dumps_json(calibration.global_.to_dict()), end="")


def cmd_spectra(args):
    cfg = _load(args)
    spectrum = pipeline.spectra_stage(
        cfg, args.events, args.calib, _MODES[args.mode], _out(args, f"spectrum_{args.mode}.csv")
    )
    print(f"{spectrum.total} events in {len(spectrum.counts)} bins")


def cmd_subtract(args):
    cfg = _load(args)
    pipeline.subtract_stage(cfg, args.on, args.off, _out(args, "subtracted.csv"))


def cmd_roistats(args):
    stats = pipeline.roistats_stage(args.input, _out(args, "roistats.json"))
    print(dumps_json(stats.to_dict()), end="")


def cmd_limit(args):
    cfg = _load(args)
    result = pipeline.limit_stage(cfg, args.roistats, _out(args, "limit.json"))
    print(f"beta2/2 < {result.beta2_over_2_bound:.3g} at {100 * result.confidence_level:.1f}% CL")


def cmd_plotdata(args):
    name = os.path.splitext(os.path.basename(args.input))[0]
    out = _out(args, f"{name}_plot.csv")
    analysis.write_plot_data(pipeline.read_any_spectrum(args.input), out)


def cmd_run_experiment(args):
    cfg = _load(args)
    out = _out(args, "experiment")
    executor = executor_for(cfg.simulation.workers)
    try:
        manifest, result = pipeline.run_config(cfg, out, executor=executor)
    finally:
        executor.shutdown(wait=True)
    problems = pipeline.verify_manifest(manifest, out)
    if problems:
        raise PipelineError("; ".join(problems), stage="verify")
    locality = limits.locality_from_config(result, cfg)
    print(f"beta2/2 < {result.beta2_over_2_bound:.3g} at {100 * result.confidence_level:.1f}% CL")
    print(f"quon q < {result.quon_q_bound:.6e}")
    print(f"locality length < {locality.length_bound_m:.3g} m")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vipsim",
        description="Simulate CCD X-ray runs of a current-induced Pauli-violation search and set limits.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("--log-file", help="also log to this file")
    common.add_argument("--config", help="YAML run configuration (defaults without)")
    common.add_argument("--out", help=f"output path (default: inside ${DATA_DIR_ENV})")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate the frames of one run")
    p.add_argument("--mode", choices=sorted(_MODES), default="on")
    p.add_argument("--beta2", type=float, help="injected beta^2/2")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="0: one per core, 1: in-process")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", parents=[common], help="select X-ray events from frame files")
    p.add_argument("--in", dest="input", required=True, help="frame directory")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("calibrate", parents=[common], help="energy calibration from source events")
    p.add_argument("--events", required=True)
    p.add_argument("--lines", help="comma-separated line labels, e.g. Mn_Ka,Mn_Kb")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("spectra", parents=[common], help="calibrated energy spectrum")
    p.add_argument("--events", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--mode", choices=["on", "off"], default="on")
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("subtract", parents=[common], help="current-on minus current-off")
    p.add_argument("--on", required=True)
    p.add_argument("--off", required=True)
    p.set_defaults(func=cmd_subtract)

    p = sub.add_parser("roistats", parents=[common], help="ROI counts and significance")
    p.add_argument("--in", dest="input", required=True, help="subtracted spectrum CSV")
    p.set_defaults(func=cmd_roistats)

    p = sub.add_parser("limit", parents=[common], help="upper bound on beta^2/2")
    p.add_argument("--roistats", required=True)
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("run-experiment", parents=[common], help="all stages end to end")
    p.add_argument("--seed", type=int)
    p.add_argument("--beta2", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("plotdata", parents=[common], help="x,y,yerr CSV of a spectrum")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        args.func(args)
    except (VipsimError, ValueError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"vipsim {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
