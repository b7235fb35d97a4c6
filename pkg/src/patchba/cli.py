"""Command line: ``patchba plan | simulate | run | eval``.

Exit codes: 0 success, 2 configuration or input error, 3 I/O error,
4 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PIPELINE = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS")


class InputError(Exception):
    """Bad or missing user input; maps to exit code 2."""


def _limit_threads(n):
    # must run before numpy is first imported to take effect
    if n is not None:
        if n < 1:
            raise InputError("--threads must be at least 1")
        for var in THREAD_VARS:
            os.environ[var] = str(n)


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def _need_file(path: Path, what="file"):
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def cmd_plan(args):
    from .mission_sim import footprint_length, max_pair_time, overlap_from_params

    v = args.velocity
    if args.h_im is not None:
        h_im = args.h_im
    else:
        if None in (args.focal_mm, args.pixel_um, args.pixels, args.altitude):
            raise InputError("give --h-im, or all of --focal-mm, --pixel-um, --pixels and --altitude")
        h_im = footprint_length(args.pixels, args.pixel_um, args.altitude, args.focal_mm)
    if args.overlap is not None:
        beta = args.overlap
    else:
        if args.interval is None or None in (args.focal_mm, args.pixel_um, args.pixels, args.altitude):
            raise InputError("give --overlap, or --interval with the camera parameters")
        beta = overlap_from_params(args.focal_mm, v, args.interval, args.pixels, args.pixel_um, args.altitude)
    t = max_pair_time(h_im, beta, v)
    out = {"velocity_mps": v, "overlap_pct": beta, "h_im_m": h_im, "t_s": t}
    print(f"beta = {beta:.12g} %")
    print(f"h_im = {h_im:.12g} m")
    print(f"t = {t:.12g} s")
    if args.budget is not None:
        fits = t >= args.budget
        out.update(budget_s=args.budget, fits_budget=fits)
        print(f"processing budget {args.budget:.12g} s {'fits' if fits else 'does not fit'} within t")
    print(json.dumps(out, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _mission_from_config(cfg: dict, args):
    from .geometry import CameraModel, GeoAnchor
    from .mission_sim import DEFAULT_ANCHOR, MACS_CAMERA, FlightPlan, NoiseSpec, TerrainSpec, generate_mission

    cfg = dict(cfg)
    known = {"camera", "plan", "terrain", "noise", "seed", "anchor", "landmark_density"}
    unknown = set(cfg) - known
    if unknown:
        raise InputError(f"unknown simulation config keys: {sorted(unknown)}")
    camera = CameraModel.from_dict(cfg.get("camera", MACS_CAMERA))
    plan = dict(cfg.get("plan", {}))
    for key, val in (("strip_count", args.strips), ("images_per_strip", args.images_per_strip),
                     ("overlap_pct", args.overlap), ("side_overlap_pct", args.side_overlap),
                     ("altitude_m", args.altitude), ("velocity_mps", args.velocity)):
        if val is not None:
            plan[key] = val
    fp = FlightPlan.from_camera(camera, **plan)
    terrain = dict(cfg.get("terrain", {}))
    if args.terrain is not None:
        terrain["kind"] = args.terrain
    if "slope" in terrain:
        terrain["slope"] = tuple(terrain["slope"])
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    density = args.density if args.density is not None else float(cfg.get("landmark_density", 0.3))
    anchor = GeoAnchor(**cfg["anchor"]) if "anchor" in cfg else DEFAULT_ANCHOR
    return generate_mission(fp, camera, TerrainSpec(**terrain), NoiseSpec(**cfg.get("noise", {})), seed, anchor,
                            density)


def cmd_simulate(args):
    from .io import save_mission

    cfg = _load_json(args.config) if args.config else {}
    try:
        mission = _mission_from_config(cfg, args)
    except TypeError as exc:
        raise InputError(f"bad simulation config: {exc}") from exc
    save_mission(args.out, mission)
    print(f"wrote {mission.n_images} images, {len(mission.landmarks)} landmarks to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _pipeline_config(args):
    from .pipeline import PipelineConfig

    cfg = _load_json(args.config) if args.config else {}
    if args.mode is not None:
        cfg["mode"] = args.mode
    if args.cluster_size is not None:
        cfg["cluster_size"] = args.cluster_size
    return PipelineConfig.from_dict(cfg)


def _imagery_inputs(args):
    from .geometry import CameraModel
    from .io import read_dsm_asc, read_mission_poses_csv, read_pgm
    from .pipeline import PipelineInputs

    frames = Path(args.frames)
    if not frames.is_dir():
        raise InputError(f"frame directory not found: {frames}")
    nav_path = _need_file(Path(args.nav), "nav pose file")
    dsm_path = _need_file(Path(args.dsm), "DSM file")
    camera = CameraModel.from_dict(_load_json(args.camera))
    order, nav, strips, _ = read_mission_poses_csv(nav_path)
    images = {}
    for i in order:
        path = _need_file(frames / f"{i}.pgm", "frame")
        img = read_pgm(path)
        if img.shape != (camera.height_px, camera.width_px):
            raise InputError(f"{path}: size {img.shape[::-1]} does not match the camera")
        images[i] = img
    return PipelineInputs(camera, read_dsm_asc(dsm_path), nav, order, strips, images=images), None


def _mission_inputs(path):
    from .io import load_mission
    from .pipeline import PipelineInputs

    try:
        mission = load_mission(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    return PipelineInputs.from_mission(mission), mission


def _write_front_end(out: Path, fe, order):
    from .io import write_footprints_csv, write_patch_trajectory_csv

    write_footprints_csv(out / "footprints.csv", fe.footprints)
    states = {i: list(fe.own_states[i]) + list(fe.injected_states[i]) for i in order}
    write_patch_trajectory_csv(out / "patches.csv", states, order)


def _renumbered_tracks(records):
    from dataclasses import replace

    out = []
    for rec in records:
        for t in rec.tracks:
            out.append(replace(t, track_id=len(out)))
    return out


def write_run(out: Path, run, order, cfg, mission=None):
    from .io import write_json, write_matches_csv, write_metrics_json, write_points_ply, write_poses_csv, \
        write_residuals_csv, write_solve_stats_json, write_tracks_csv
    from .mission_sim import evaluate

    reported = run.reported_records()
    write_poses_csv(out / "poses.csv", run.poses)
    write_points_ply(out / "points.ply", run.points())
    write_residuals_csv(out / "residuals.csv", reported)
    write_matches_csv(out / "matches.csv", run.matches, run.front_end.feature_sets)
    write_tracks_csv(out / "tracks.csv", _renumbered_tracks(reported))
    _write_front_end(out, run.front_end, order)
    write_solve_stats_json(out / "solve_stats.json", run.records)
    if run.cluster_logs:
        write_json(out / "clusters.json", [c.to_dict() for c in run.cluster_logs])
    write_json(out / "run.json", {"mode": run.mode, "timings": run.timings, "config": cfg.to_dict(),
                                  "weak_links": [list(w) for w in run.weak_links]})
    if mission is not None:
        write_metrics_json(out / "metrics.json", evaluate(run, mission))


def cmd_run(args):
    from .io import write_json
    from .pipeline import PipelineFailure, run_pipeline

    cfg = _pipeline_config(args)
    if args.mission:
        inputs, mission = _mission_inputs(args.mission)
    elif args.frames:
        if None in (args.nav, args.dsm, args.camera):
            raise InputError("imagery input needs --frames, --nav, --dsm and --camera")
        inputs, mission = _imagery_inputs(args)
    else:
        raise InputError("give --mission DIR or --frames DIR with --nav, --dsm and --camera")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    try:
        run = run_pipeline(inputs, cfg)
    except PipelineFailure as exc:
        if exc.front_end is not None:
            _write_front_end(out, exc.front_end, inputs.order)
        write_json(out / "failure.json", {"stage": exc.stage, "error": str(exc)})
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    write_run(out, run, inputs.order, cfg, mission)
    t = run.timings
    print(f"{run.mode}: {len(run.poses)} poses, total {t['total_s']:.2f} s, matching {t['matching_s']:.2f} s"
          f" -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


class _StoredRun:
    def __init__(self, poses, residual_norms, timings):
        self.poses = poses
        self.residual_norms = residual_norms
        self.timings = timings


def _load_run(run_dir: Path):
    import csv

    import numpy as np

    from .io import read_json, read_poses_csv

    poses, _ = read_poses_csv(_need_file(run_dir / "poses.csv", "pose file"))
    norms = []
    res = run_dir / "residuals.csv"
    if res.is_file():
        with open(res, newline="") as fh:
            norms = [float(r["norm"]) for r in csv.DictReader(fh) if int(r["inlier"])]
    meta = read_json(run_dir / "run.json") if (run_dir / "run.json").is_file() else {}
    return _StoredRun(poses, np.array(norms), meta.get("timings", {})), meta.get("mode")


def cmd_eval(args):
    from .errors import IdMismatch
    from .io import load_mission, write_metrics_json, write_table_csv
    from .mission_sim import cross_strip_pairs, evaluate

    try:
        mission = load_mission(args.mission)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    pairs = cross_strip_pairs(mission)
    reports = {}
    for r in args.run:
        run_dir = Path(r)
        stored, mode = _load_run(run_dir)
        try:
            report = evaluate(stored, mission, pairs)
        except IdMismatch as exc:
            raise InputError(f"{run_dir}: {exc}") from exc
        name = run_dir.name if run_dir.name not in reports else str(run_dir)
        reports[name] = report
        write_metrics_json(run_dir / "metrics.json", report)
        print(f"{name} ({mode or 'unknown mode'}): reprojection {report.mean_reprojection_error_px:.3f} px, "
              f"position RMSE {report.position_rmse_m:.3f} m (nav {report.nav_position_rmse_m:.3f} m)")
    out = Path(args.out) if args.out else Path(args.run[0])
    out.mkdir(parents=True, exist_ok=True)
    write_table_csv(out / "comparison.csv", reports)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="patchba", description="Patch-tracked clustered bundle adjustment for "
                                                            "multi-strip aerial imagery.")
    p.add_argument("--threads", type=int, default=None, help="cap numerical library threads (1 = deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("plan", help="time budget between exposures from flight parameters")
    pl.add_argument("--velocity", type=float, required=True, help="ground speed, m/s")
    pl.add_argument("--overlap", type=float, help="along-track overlap, percent")
    pl.add_argument("--h-im", type=float, help="along-track footprint length, m")
    pl.add_argument("--interval", type=float, help="exposure interval, s (derives the overlap)")
    pl.add_argument("--focal-mm", type=float)
    pl.add_argument("--pixel-um", type=float)
    pl.add_argument("--pixels", type=float, help="image size along track, px")
    pl.add_argument("--altitude", type=float, help="flying height above ground, m")
    pl.add_argument("--budget", type=float, help="processing time needed per image pair, s")
    pl.add_argument("--json", help="also write the plan to this file")
    pl.set_defaults(func=cmd_plan)

    si = sub.add_parser("simulate", help="write a synthetic mission directory")
    si.add_argument("--out", required=True)
    si.add_argument("--config", help="JSON with camera/plan/terrain/noise/anchor/seed/landmark_density")
    si.add_argument("--seed", type=int)
    si.add_argument("--strips", type=int)
    si.add_argument("--images-per-strip", type=int)
    si.add_argument("--overlap", type=float)
    si.add_argument("--side-overlap", type=float)
    si.add_argument("--altitude", type=float)
    si.add_argument("--velocity", type=float)
    si.add_argument("--terrain", choices=("flat", "plane", "hills"))
    si.add_argument("--density", type=float, help="landmarks per square metre")
    si.set_defaults(func=cmd_simulate)

    ru = sub.add_parser("run", help="orient a mission in one of the four modes")
    ru.add_argument("--out", required=True)
    ru.add_argument("--mission", help="mission directory")
    ru.add_argument("--frames", help="directory of <image_id>.pgm frames")
    ru.add_argument("--nav", help="navigation poses CSV for --frames")
    ru.add_argument("--dsm", help="DSM ASCII grid for --frames")
    ru.add_argument("--camera", help="camera JSON for --frames")
    ru.add_argument("--config", help="pipeline config JSON")
    ru.add_argument("--mode", choices=("proposed", "incremental", "cluster_incremental", "global"))
    ru.add_argument("--cluster-size", type=int)
    ru.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="metrics of one or more runs against the mission truth")
    ev.add_argument("--mission", required=True)
    ev.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    ev.add_argument("--out", help="directory for comparison.csv (default: first run)")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _limit_threads(args.threads)
        from .errors import PatchBAError

        try:
            return args.func(args)
        except PatchBAError as exc:
            if isinstance(exc, ValueError):
                raise InputError(str(exc)) from exc
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_PIPELINE
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
