"""Command-line entry point.

Subcommands: synth, fragments, join, eval, plot, pipeline. Configuration
comes from ``--config FILE`` (INI, one section per stage) and per-key flags
``--section.key VALUE``; flags win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, configurable_fields, load_config, with_overrides
from .detections import DetectionError, ImageFormatError
from .fragments import NoInitialSetError
from .joiner import DirectoryFrames, OwnershipConflict
from .synth import BundleError, read_manifest

# Config sections exposed per subcommand.
STAGE_SECTIONS = {
    "synth": ("run", "scenario", "noise"),
    "fragments": ("matcher",),
    "join": ("run", "classifier", "joiner"),
    "eval": ("eval",),
    "plot": (),
    "pipeline": ("run", "scenario", "noise", "matcher", "classifier", "joiner", "eval"),
}


def _add_config_flags(p: argparse.ArgumentParser, sections) -> None:
    p.add_argument("--config", type=Path, help="INI file with one section per stage")
    defaults = PipelineConfig()
    for section in sections:
        group = p.add_argument_group(f"[{section}]")
        for key, value in configurable_fields(section, defaults):
            if section == "run" and key == "seed":
                continue
            group.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}",
                               metavar=type(value).__name__.upper(),
                               help=f"(default: {value})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hivetrack",
        description="Fragment-and-join tracking of many similar-looking agents.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario bundle")
    p.add_argument("--out", type=Path, required=True, help="bundle directory")
    p.add_argument("--seed", type=int, help="global seed (default: 0)")
    _add_config_flags(p, STAGE_SECTIONS["synth"])

    p = sub.add_parser("fragments", help="build track fragments from detections")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--fps", type=float, default=10.0, help="(default: 10.0)")
    p.add_argument("--out", type=Path, required=True, help="directory for fragments/residuals")
    _add_config_flags(p, STAGE_SECTIONS["fragments"])

    p = sub.add_parser("join", help="join fragments into trajectories")
    p.add_argument("--fragments", type=Path, required=True)
    p.add_argument("--residuals", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True, help="directory of frame_%%06d.pgm")
    p.add_argument("--num-frames", type=int, help="recording length (default: from frames)")
    p.add_argument("--fps", type=float, default=10.0, help="(default: 10.0)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, help="global seed (default: 0)")
    p.add_argument("--workers", type=int, default=1,
                   help="feature prefetch threads; never changes outputs (default: 1)")
    _add_config_flags(p, STAGE_SECTIONS["join"])

    p = sub.add_parser("eval", help="score trajectories against ground truth")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--false-positives", type=Path, help="FP sidecar, needed for error causes")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p, STAGE_SECTIONS["eval"])

    p = sub.add_parser("plot", help="render the speed-shaded trajectory overlay")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--bounds", help="WIDTHxHEIGHT (default: from --bundle or the data)")
    p.add_argument("--bundle", type=Path, help="bundle whose manifest gives the bounds")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pipeline", help="synth, fragments, join, eval and plot in one run")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--seed", type=int, help="global seed (default: 0)")
    p.add_argument("--workers", type=int, default=1,
                   help="feature prefetch threads; never changes outputs (default: 1)")
    _add_config_flags(p, STAGE_SECTIONS["pipeline"])
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    values: dict[str, dict[str, str]] = {}
    for dest, text in vars(args).items():
        if dest.startswith("cfg:") and text is not None:
            section, key = dest[4:].split(".", 1)
            values.setdefault(section, {})[key] = text
    if getattr(args, "seed", None) is not None:
        values.setdefault("run", {})["seed"] = str(args.seed)
    return with_overrides(cfg, values, "command line")


def _bounds(args) -> tuple[int, int]:
    if args.bounds:
        try:
            w, h = (int(v) for v in args.bounds.lower().split("x"))
        except ValueError:
            raise ConfigError(f"bad --bounds {args.bounds!r}, expected WIDTHxHEIGHT") from None
        return w, h
    if args.bundle:
        m = read_manifest(args.bundle / "manifest.txt")
        return int(m["width"]), int(m["height"])
    from .joiner import read_trajectories
    recs = read_trajectories(args.trajectories)
    xs = [v for r in recs for v in r.x]
    ys = [v for r in recs for v in r.y]
    return int(max(xs, default=0)) + 1, int(max(ys, default=0)) + 1


def _dispatch(args: argparse.Namespace) -> int:
    from . import pipeline as pl

    if args.command == "plot":
        pl.plot_stage(args.trajectories, _bounds(args), args.out)
        return 0
    cfg = resolve_config(args)
    if args.command == "synth":
        manifest = pl.synth_stage(cfg, args.out)
        print(f"wrote bundle {args.out} ({manifest['num_agents']} agents, "
              f"{manifest['num_frames']} frames)")
    elif args.command == "fragments":
        frags, res = pl.fragments_stage(args.detections, cfg, args.out, args.fps)
        print(f"{len(frags)} fragments, {len(res)} residual detections")
    elif args.command == "join":
        frames = DirectoryFrames(args.frames)
        num_frames = args.num_frames or len(list(args.frames.glob("frame_*.pgm")))
        result = pl.join_stage(args.fragments, args.residuals, frames, cfg, args.out,
                               num_frames, args.fps, args.workers)
        print(f"{len(result.trajectories)} trajectories, {len(result.log_lines)} iterations")
    elif args.command == "eval":
        report = pl.eval_stage(args.trajectories, args.truth, args.false_positives, cfg, args.out)
        s = report.summary
        print(f"mt2={s.get('mt2')} ml2={s.get('ml2')} mt5={s.get('mt5')} ml5={s.get('ml5')} "
              f"swaps={s.get('swap_count')}")
    elif args.command == "pipeline":
        res = pl.run_pipeline(cfg, args.out, args.workers)
        s = res.report.summary
        print(f"run {args.out}: mt5={s.get('mt5')} ml5={s.get('ml5')} "
              f"mt_generic={s.get('mt_generic')} swaps={s.get('swap_count')}")
    return 0


EXPECTED_ERRORS = (ConfigError, configparser.Error, FileNotFoundError, BundleError,
                   DetectionError, ImageFormatError, NoInitialSetError, OwnershipConflict,
                   OSError, ValueError, KeyError)


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except EXPECTED_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"hivetrack {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
