"""End-to-end orientation pipeline: patch tracking, features, matching and the four solving modes."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ba.solver import LMOptions
from .ba.strategies import SolveSettings, run_cluster_incremental, run_incremental, solve_image_set
from .cluster_manager import CARRYOVER_FRACTION, OVERLAP_THRESHOLD, form_clusters, run_proposed
from .errors import ConfigError, NoOverlap, PatchBAError
from .features import MAX_PER_PATCH, FeatureSet, detect_in_patches, match_brute_force, match_patchwise, \
    shared_keys, synth_observations
from .patch_tracker import TrackerConfig, cross_strip_project, make_grid, spread_spacing, transfer_footprint, \
    transfer_nav, wrap_patches
from .terrain import compute_footprint, elevation_at, footprint_overlap

log = logging.getLogger(__name__)

MODES = ("proposed", "incremental", "cluster_incremental", "global")


class PipelineFailure(PatchBAError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause, front_end=None):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.front_end = front_end  # whatever the front end produced before the failure


@dataclass
class PipelineConfig:
    mode: str = "proposed"
    grid_rows: int = 5
    grid_cols: int = 5
    patch_size_px: int = 150
    grid_layout: str = "spread"        # spread | block
    cluster_size: int = 12
    overlap_fraction: float = CARRYOVER_FRACTION
    transfer_mode: str = "footprint"
    wrap_enabled: bool = True
    nominal_depth_m: float = None      # default: nav height above the DSM
    overlap_threshold: float = OVERLAP_THRESHOLD
    max_per_patch: int = MAX_PER_PATCH
    ratio: float = 0.8
    max_match_distance: float = 1.0    # unit-norm descriptors: correlation >= 0.5
    robust_delta_px: float = 2.0
    min_matches: int = 15
    weak_links: str = "nav"            # baselines: "raise" aborts on a weak consecutive link
    prior_sigma_pos_m: float = 1.0
    prior_sigma_att_deg: float = 0.2
    max_iterations: int = 100
    gradient_tol: float = 1e-8
    cost_rel_tol: float = 1e-10
    step_tol: float = 1e-10
    lambda_init: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.grid_layout not in ("spread", "block"):
            raise ConfigError(f"unknown grid_layout {self.grid_layout!r}")
        if self.transfer_mode not in ("nav", "footprint"):
            raise ConfigError(f"unknown transfer_mode {self.transfer_mode!r}")
        if self.mode in ("proposed", "cluster_incremental") and (self.cluster_size is None or self.cluster_size < 4):
            raise ConfigError("cluster_size M >= 4 is required for this mode")
        if not 0 < self.overlap_fraction < 1:
            raise ConfigError("overlap_fraction must lie in (0, 1)")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.patch_size_px < 16:
            raise ConfigError("grid needs >= 1 row and column and patches of >= 16 px")
        if self.max_match_distance is not None and self.max_match_distance <= 0:
            raise ConfigError("max_match_distance must be positive (or null for no bound)")
        if self.robust_delta_px <= 0 or self.prior_sigma_pos_m <= 0 or self.prior_sigma_att_deg <= 0:
            raise ConfigError("robust delta and prior sigmas must be positive")
        if self.nominal_depth_m is not None and self.nominal_depth_m <= 0:
            raise ConfigError("nominal_depth_m must be positive")
        if self.weak_links not in ("raise", "nav"):
            raise ConfigError(f"weak_links must be 'raise' or 'nav', got {self.weak_links!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def solve_settings(self) -> SolveSettings:
        lm = LMOptions(self.max_iterations, self.gradient_tol, self.cost_rel_tol, self.step_tol, self.lambda_init)
        return SolveSettings(self.robust_delta_px, self.prior_sigma_pos_m, math.radians(self.prior_sigma_att_deg),
                             self.min_matches, self.weak_links, lm)


@dataclass
class PipelineInputs:
    """Everything the pipeline consumes.

    Either ``landmarks`` (synthetic route) or ``images`` (grayscale rasters
    keyed by image id) is set. On the synthetic route observations are
    generated with ``scene_poses``, the true cameras, which the solver never
    sees.
    """

    camera: object
    dsm: object
    nav_poses: dict
    order: list
    strip_of: dict
    landmark_ids: np.ndarray = None
    landmarks: np.ndarray = None
    obs_noise_px: float = 0.0
    seed: int = 0
    images: dict = None
    scene_poses: dict = None

    @classmethod
    def from_mission(cls, mission, images=None):
        if images is not None:
            return cls(mission.camera, mission.dsm, mission.nav_poses, list(mission.image_ids), mission.strip_ids,
                       images=images, seed=mission.seed)
        return cls(mission.camera, mission.dsm, mission.nav_poses, list(mission.image_ids), mission.strip_ids,
                   mission.landmark_ids, mission.landmarks, mission.noise.obs_noise_px, mission.seed,
                   scene_poses=mission.truth_poses)


@dataclass
class FrontEnd:
    footprints: dict
    grids: dict            # strip -> PatchGrid
    own_states: dict       # image -> own-strip patch states
    injected_states: dict  # image -> patches injected from a neighbour strip
    injected_source: dict  # image -> source image of the injection
    feature_sets: dict
    timings: dict


@dataclass
class PipelineRun:
    mode: str
    poses: dict
    residual_norms: np.ndarray
    timings: dict
    records: list
    front_end: FrontEnd
    clusters: list = field(default_factory=list)
    cluster_logs: list = field(default_factory=list)
    matches: dict = field(default_factory=dict)
    weak_links: list = field(default_factory=list)

    def points(self):
        """All estimated points, concatenated over the reported solves."""
        pts = [np.array(list(r.result.points.values())).reshape(-1, 3) for r in self.reported_records()]
        return np.concatenate(pts) if pts else np.zeros((0, 3))

    def reported_records(self):
        """The solves whose residuals describe the final state of the run."""
        if self.mode in ("proposed", "global"):
            return list(self.records)
        if self.mode == "incremental":
            return self.records[-1:]
        last = {}
        for r in self.records:
            last[r.label] = r
        return list(last.values())


def _nominal_depth(cfg, inputs, pose, fp):
    if cfg.nominal_depth_m is not None:
        return cfg.nominal_depth_m
    try:
        ground = elevation_at(inputs.dsm, fp.center[0], fp.center[1])
    except PatchBAError:
        ground = 0.0
    return max(1.0, float(pose.translation[2] - ground))


def track_patches(inputs: PipelineInputs, cfg: PipelineConfig, inject: bool):
    """Patch grids per strip, propagated image to image, with optional cross-strip injection."""
    cam = inputs.camera
    footprints = {i: compute_footprint(cam, inputs.nav_poses[i], inputs.dsm) for i in inputs.order}
    strips = sorted(set(inputs.strip_of[i] for i in inputs.order))
    strip_index = {s: k for k, s in enumerate(strips)}
    grids, own, injected, source = {}, {}, {}, {}
    prev_in_strip = {}
    for img in inputs.order:
        s = inputs.strip_of[img]
        if s not in grids:
            spacing = None
            if cfg.grid_layout == "spread":
                spacing = spread_spacing(cfg.grid_rows, cfg.grid_cols, cam.width_px, cam.height_px)
            grids[s], states = make_grid(cfg.grid_rows, cfg.grid_cols, cfg.patch_size_px, cam.width_px,
                                         cam.height_px, spacing, strip_index[s] * cfg.grid_rows * cfg.grid_cols)
        else:
            prev = prev_in_strip[s]
            if cfg.transfer_mode == "footprint":
                states = transfer_footprint(own[prev], footprints[prev], footprints[img], grids[s])
            else:
                tc = TrackerConfig(_nominal_depth(cfg, inputs, inputs.nav_poses[prev], footprints[prev]),
                                   "nav", cfg.wrap_enabled)
                states = transfer_nav(own[prev], inputs.nav_poses[prev], inputs.nav_poses[img], cam, tc, grids[s])
            if cfg.wrap_enabled:
                states = wrap_patches(states, cam.width_px, cam.height_px, cfg.patch_size_px)
        own[img] = states
        prev_in_strip[s] = img
        injected[img] = []
        if inject:
            best, best_ov = None, 0.0
            for cand in own:
                if inputs.strip_of[cand] == s:
                    continue
                ov = footprint_overlap(footprints[cand], footprints[img])
                if ov > best_ov:
                    best, best_ov = cand, ov
            if best is not None and best_ov >= cfg.overlap_threshold:
                try:
                    injected[img] = cross_strip_project(own[best], footprints[best], footprints[img],
                                                        grids[inputs.strip_of[best]], None,
                                                        cfg.overlap_threshold, best)
                    source[img] = best
                except NoOverlap:
                    pass
    return footprints, grids, own, injected, source


def extract_features(inputs: PipelineInputs, cfg: PipelineConfig, states_of: dict):
    out = {}
    for img in inputs.order:
        states = states_of[img]
        if inputs.images is not None:
            out[img] = detect_in_patches(inputs.images[img], states, cfg.patch_size_px, img, cfg.max_per_patch)
        else:
            rng = np.random.default_rng([inputs.seed, img])
            out[img] = synth_observations(inputs.landmark_ids, inputs.landmarks, inputs.camera,
                                          inputs.scene_poses[img],
                                          states, cfg.patch_size_px, inputs.obs_noise_px, rng, img,
                                          cfg.max_per_patch)
    return out


def build_front_end(inputs: PipelineInputs, cfg: PipelineConfig) -> FrontEnd:
    inject = cfg.mode in ("proposed", "global")
    t0 = time.perf_counter()
    footprints, grids, own, injected, source = track_patches(inputs, cfg, inject)
    t1 = time.perf_counter()
    states_of = {i: list(own[i]) + list(injected[i]) for i in inputs.order}
    features = extract_features(inputs, cfg, states_of)
    t2 = time.perf_counter()
    timings = {"patch_tracking_s": t1 - t0, "feature_extraction_s": t2 - t1}
    return FrontEnd(footprints, grids, own, injected, source, features, timings)


class _Matcher:
    """Cached pair matcher that accumulates its own running time."""

    def __init__(self, feature_sets, patchwise, ratio, max_distance=None):
        self.fs = feature_sets
        self.patchwise = patchwise
        self.ratio = ratio
        self.max_distance = max_distance
        self.cache = {}
        self.elapsed = 0.0

    def __call__(self, a, b):
        key = (a, b)
        if key in self.cache:
            return self.cache[key]
        t0 = time.perf_counter()
        fa, fb = self.fs[a], self.fs[b]
        if self.patchwise:
            m = match_patchwise(fa, fb, ratio=self.ratio, max_distance=self.max_distance) \
                if shared_keys(fa, fb) else None
        else:
            m = match_brute_force(fa, fb, ratio=self.ratio, max_distance=self.max_distance)
        self.elapsed += time.perf_counter() - t0
        self.cache[key] = m
        return m


def run_pipeline(inputs: PipelineInputs, cfg: PipelineConfig) -> PipelineRun:
    t_start = time.perf_counter()
    stage = "front_end"
    fe = None
    try:
        fe = build_front_end(inputs, cfg)
        settings = cfg.solve_settings()
        matcher = _Matcher(fe.feature_sets, cfg.mode in ("proposed", "global"), cfg.ratio, cfg.max_match_distance)
        cam, nav = inputs.camera, inputs.nav_poses
        clusters, logs, weak = [], [], []
        stage = cfg.mode
        if cfg.mode == "global":
            ids = list(inputs.order)
            matches = []
            for k, a in enumerate(ids):
                for b in ids[k + 1:]:
                    m = matcher(a, b)
                    if m is not None and len(m):
                        matches.append(m)
            rec = solve_image_set(cam, ids, fe.feature_sets, matches, {i: nav[i] for i in ids}, nav, (),
                                  settings, label="global")
            records, poses = [rec], dict(rec.result.poses)
        elif cfg.mode == "proposed":
            clusters = form_clusters(inputs.order, cfg.cluster_size, inputs.strip_of, fe.footprints,
                                     cfg.overlap_fraction, cfg.overlap_threshold, inject=True)
            run = run_proposed(cam, clusters, fe.feature_sets, matcher, nav, settings)
            records, poses, logs = run.records, run.poses, run.logs
        elif cfg.mode == "incremental":
            run = run_incremental(cam, inputs.order, fe.feature_sets, matcher, nav, inputs.strip_of, settings)
            records, poses, weak = run.records, run.poses, run.weak_links
        else:
            carry = math.ceil(cfg.overlap_fraction * cfg.cluster_size)
            run = run_cluster_incremental(cam, inputs.order, fe.feature_sets, matcher, nav, cfg.cluster_size,
                                          carry, inputs.strip_of, settings)
            records, poses, weak = run.records, run.poses, run.weak_links
    except (PatchBAError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise PipelineFailure(stage, exc, fe) from exc
    total = time.perf_counter() - t_start
    timings = dict(fe.timings)
    timings["matching_s"] = matcher.elapsed
    timings["total_s"] = total
    out = PipelineRun(cfg.mode, poses, np.zeros(0), timings, records, fe, clusters, logs, matcher.cache, weak)
    norms = [r.result.residual_norms[r.result.inliers] for r in out.reported_records()]
    out.residual_norms = np.concatenate(norms) if norms else np.zeros(0)
    return out


def run_mission(mission, cfg: PipelineConfig, images=None) -> PipelineRun:
    return run_pipeline(PipelineInputs.from_mission(mission, images), cfg)
