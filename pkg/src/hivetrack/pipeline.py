"""Stage runners shared by the CLI subcommands and the full pipeline.

Each stage reads its inputs from files written by the previous one, so the
full pipeline is exactly the composition of the individual subcommands.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .config import PipelineConfig, manifest_entries
from .detections import DetectionTable, read_detections
from .fragments import build_fragments, read_fragment_csv, select_initial_set, write_fragments, \
    write_residuals
from .joiner import (DirectoryFrames, FrameSource, JoinResult, check_conservation,
                     read_trajectories, run_joining, write_trajectories)
from .metrics import EvalReport, build_report, write_report
from .plotting import emit_plot, plot_progress, plot_tracked_time, plot_trajectories
from .synth import (HiveRenderer, corrupt_detections, load_scenario_bundle, read_manifest,
                    read_truth, render_frames, simulate, write_manifest, write_scenario_bundle)

log = logging.getLogger(__name__)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def synth_stage(cfg: PipelineConfig, out: Path) -> dict[str, str]:
    """Scenario, truth, noisy detections and (optionally) rendered frames."""
    scenario = cfg.scenario.build(cfg.seed)
    truth = simulate(scenario)
    detections = corrupt_detections(truth, cfg.noise, cfg.seed)
    frames = render_frames(truth, scenario) if cfg.run.write_frames else None
    return write_scenario_bundle(truth, frames, detections, out, scenario=scenario,
                                 noise=cfg.noise, noise_seed=cfg.seed)


def fragments_stage(detections_path: Path, cfg: PipelineConfig, out: Path, fps: float = 10.0):
    table = read_detections(_require(detections_path, "detections file"), fps=fps)
    fragments, residuals = build_fragments(table, cfg.matcher)
    out.mkdir(parents=True, exist_ok=True)
    write_fragments(fragments, out / "fragments.csv")
    write_residuals(residuals, out / "residuals.csv")
    return fragments, residuals


def join_stage(fragments_path: Path, residuals_path: Path, frames: FrameSource,
               cfg: PipelineConfig, out: Path, num_frames: int | None = None,
               fps: float = 10.0, workers: int = 1) -> JoinResult:
    fragments, _ = read_fragment_csv(_require(fragments_path, "fragments file"))
    _, residuals = read_fragment_csv(_require(residuals_path, "residuals file"))
    table = DetectionTable.from_detections(
        [d for fr in fragments for d in fr.detections] + list(residuals), fps=fps)
    _, initial = select_initial_set(fragments, table)
    joiner_cfg = replace(cfg.joiner, workers=workers)
    result = run_joining(fragments, residuals, initial, frames, joiner_cfg, cfg.classifier,
                         seed=cfg.seed, num_frames=num_frames)
    check_conservation(result)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectories(result, out / "trajectories.csv", out / "status.csv")
    (out / "progress.log").write_text("".join(line + "\n" for line in result.log_lines))
    return result


def eval_stage(trajectories_path: Path, truth_path: Path, fp_path: Path | None,
               cfg: PipelineConfig, out: Path, fps: float = 10.0) -> EvalReport:
    records = read_trajectories(_require(trajectories_path, "trajectories file"))
    _require(truth_path, "truth file")
    manifest_path = truth_path.parent / "manifest.txt"
    manifest = read_manifest(manifest_path) if manifest_path.exists() else {}
    truth = read_truth(truth_path, int(manifest.get("width", 0)), int(manifest.get("height", 0)),
                       float(manifest.get("fps", fps)), int(manifest.get("num_frames", 0)) or None)
    fps_list = None
    if fp_path is not None:
        fps_list = list(read_detections(_require(fp_path, "false-positive file")))
    report = build_report(records, truth, fps_list, cfg.eval)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.csv")
    return report


def plot_stage(trajectories_path: Path, bounds: tuple[int, int], out: Path,
               report: EvalReport | None = None, log_lines=None) -> None:
    records = read_trajectories(_require(trajectories_path, "trajectories file"))
    out.mkdir(parents=True, exist_ok=True)
    emit_plot(records, bounds, out / "overlay.pgm")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    plot_trajectories(records, bounds, figs / "trajectories.png")
    if report is not None and report.evals:
        plot_tracked_time(report.evals, figs / "tracked_time.png")
    if log_lines:
        plot_progress(log_lines, figs / "progress.png")


@dataclass
class PipelineResult:
    join: JoinResult
    report: EvalReport
    manifest: dict[str, str]


RUN_OUTPUTS = ("fragments.csv", "residuals.csv", "trajectories.csv", "status.csv",
               "progress.log", "report.json", "report.csv", "overlay.pgm")


def run_pipeline(cfg: PipelineConfig, out, workers: int = 1) -> PipelineResult:
    """synth -> fragments -> join -> eval -> plot inside one run directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bundle_dir = out / "bundle"
    synth_stage(cfg, bundle_dir)
    bundle = load_scenario_bundle(bundle_dir, expected_seed=cfg.seed)
    fps = bundle.truth.fps
    log.info("synth: %d detections", len(bundle.detections))
    fragments, residuals = fragments_stage(bundle_dir / "detections.csv", cfg, out, fps)
    log.info("fragments: %d fragments, %d residuals", len(fragments), len(residuals))
    if cfg.run.write_frames:
        frames: FrameSource = DirectoryFrames(bundle.frames_dir)
    else:
        scenario = cfg.scenario.build(cfg.seed)
        frames = HiveRenderer(scenario, simulate(scenario))
    result = join_stage(out / "fragments.csv", out / "residuals.csv", frames, cfg, out,
                        bundle.truth.num_frames, fps, workers)
    report = eval_stage(out / "trajectories.csv", bundle_dir / "truth.csv",
                        bundle_dir / "false_positives.csv", cfg, out, fps)
    plot_stage(out / "trajectories.csv", (bundle.truth.width, bundle.truth.height), out,
               report, result.log_lines)

    entries = {"seed": str(cfg.seed), **manifest_entries(cfg)}
    entries["num_fragments"] = str(len(fragments))
    entries["num_residuals"] = str(len(residuals))
    entries["num_trajectories"] = str(len(result.trajectories))
    entries["ownership_conflicts"] = str(result.conflicts)
    for name in RUN_OUTPUTS:
        entries[f"sha256.{name}"] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    write_manifest(entries, out / "manifest.txt")
    return PipelineResult(result, report, entries)
