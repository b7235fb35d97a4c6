"""Flight planning, synthetic multi-strip missions and ground-truth evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IdMismatch, InvalidPlan, NonPositiveParameter, NonPositiveVelocity
from .geometry import CameraModel, GeoAnchor, Pose, nadir_rotation, quat_multiply, rotation_angle_between, \
    rotation_exp
from .terrain import DsmRaster, compute_footprint, elevation_at, footprint_overlap

MACS_CAMERA = dict(focal_length_mm=39.84, pixel_pitch_um=4.6, width_px=7920, height_px=6004)
DEFAULT_ANCHOR = GeoAnchor(52.3, 13.1, 40.0)
TURN_TIME_S = 60.0


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


def footprint_length(n_px, pixel_pitch_um, altitude_m, focal_length_mm) -> float:
    """Ground length (m) covered by ``n_px`` pixels at nadir over flat ground."""
    return n_px * pixel_pitch_um * altitude_m / (1000.0 * focal_length_mm)


def overlap_from_params(f_mm, v, dt, N, theta_um, h_flight) -> float:
    """Along-track overlap (%) of consecutive images: (1 - v dt / h_im) * 100."""
    for name, val in (("f_mm", f_mm), ("v", v), ("dt", dt), ("N", N), ("theta_um", theta_um),
                      ("h_flight", h_flight)):
        if not val > 0:
            raise NonPositiveParameter(f"{name} must be positive, got {val}")
    h_im = footprint_length(N, theta_um, h_flight, f_mm)
    beta = (1.0 - v * dt / h_im) * 100.0
    if beta < 0:
        warnings.warn(f"images do not overlap (beta = {beta:.2f}%); clamped to 0", RuntimeWarning)
        return 0.0
    return beta


def max_pair_time(h_im, overlap_pct, v) -> float:
    """Time between exposures: the processing budget per image pair."""
    if not v > 0:
        raise NonPositiveVelocity(f"velocity must be positive, got {v}")
    if not h_im > 0:
        raise NonPositiveParameter(f"h_im must be positive, got {h_im}")
    if not 0 <= overlap_pct < 100:
        raise NonPositiveParameter(f"overlap must lie in [0, 100), got {overlap_pct}")
    return h_im * (1.0 - overlap_pct / 100.0) / v


@dataclass(frozen=True)
class FlightPlan:
    velocity_mps: float
    altitude_m: float
    shoot_interval_s: float
    overlap_pct: float
    footprint_along_m: float
    processing_budget_s: float
    strip_count: int = 2
    side_overlap_pct: float = 30.0
    images_per_strip: int = 30
    footprint_across_m: float = None

    def __post_init__(self):
        if not self.velocity_mps > 0:
            raise InvalidPlan("velocity must be positive")
        if not self.altitude_m > 0:
            raise InvalidPlan("altitude must be positive")
        if not 0 <= self.overlap_pct < 100:
            raise InvalidPlan(f"overlap must lie in [0, 100), got {self.overlap_pct}")
        if not 0 <= self.side_overlap_pct < 100:
            raise InvalidPlan(f"side overlap must lie in [0, 100), got {self.side_overlap_pct}")
        if self.strip_count < 1 or self.images_per_strip < 2:
            raise InvalidPlan("need at least one strip of two images")

    @property
    def spacing_m(self) -> float:
        return self.velocity_mps * self.shoot_interval_s

    @classmethod
    def from_camera(cls, camera: CameraModel, altitude_m=300.0, velocity_mps=20.0, overlap_pct=80.0,
                    side_overlap_pct=30.0, strip_count=2, images_per_strip=30):
        """Plan flying along the image height, so N is the image height in pixels."""
        if not velocity_mps > 0:
            raise InvalidPlan("velocity must be positive")
        if not altitude_m > 0:
            raise InvalidPlan("altitude must be positive")
        if not 0 <= overlap_pct < 100:
            raise InvalidPlan(f"overlap must lie in [0, 100), got {overlap_pct}")
        h_im = footprint_length(camera.height_px, camera.pixel_pitch_um, altitude_m, camera.focal_length_mm)
        w_im = footprint_length(camera.width_px, camera.pixel_pitch_um, altitude_m, camera.focal_length_mm)
        dt = max_pair_time(h_im, overlap_pct, velocity_mps)
        return cls(velocity_mps, altitude_m, dt, overlap_pct, h_im, dt, strip_count, side_overlap_pct,
                   images_per_strip, w_im)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TerrainSpec:
    kind: str = "hills"          # flat | plane | hills
    base_m: float = 0.0
    amplitude_m: float = 10.0
    wavelength_m: float = 400.0
    slope: tuple = (0.0, 0.0)    # dz/dE, dz/dN for "plane"
    cell_size_m: float = 12.0

    def __post_init__(self):
        if self.kind not in ("flat", "plane", "hills"):
            raise InvalidPlan(f"unknown terrain kind {self.kind!r}")
        if self.cell_size_m <= 0 or self.wavelength_m <= 0:
            raise InvalidPlan("terrain cell size and wavelength must be positive")

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.full(np.broadcast(x, y).shape, self.base_m)
        if self.kind == "plane":
            z = z + self.slope[0] * x + self.slope[1] * y
        elif self.kind == "hills":
            k = 2.0 * math.pi / self.wavelength_m
            z = z + self.amplitude_m * np.sin(k * x) * np.cos(k * y)
        return z

    def to_dict(self):
        d = asdict(self)
        d["slope"] = list(self.slope)
        return d


@dataclass(frozen=True)
class NoiseSpec:
    sigma_pos_m: float = 1.0
    sigma_att_deg: float = 0.2
    obs_noise_px: float = 0.5
    attitude_jitter_deg: float = 0.02   # larger jitter visibly changes the planned overlap

    def __post_init__(self):
        if min(self.sigma_pos_m, self.sigma_att_deg, self.obs_noise_px, self.attitude_jitter_deg) < 0:
            raise InvalidPlan("noise standard deviations must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Mission:
    camera: CameraModel
    anchor: GeoAnchor
    dsm: DsmRaster
    plan: FlightPlan
    terrain: TerrainSpec
    noise: NoiseSpec
    seed: int
    image_ids: list
    strip_ids: dict
    timestamps: dict
    truth_poses: dict
    nav_poses: dict
    landmark_ids: np.ndarray
    landmarks: np.ndarray
    landmark_density: float = 0.3

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    def config_dict(self):
        return {"plan": self.plan.to_dict(), "camera": self.camera.to_dict(), "anchor": self.anchor.to_dict(),
                "terrain": self.terrain.to_dict(), "noise": self.noise.to_dict(), "seed": self.seed,
                "landmark_density_per_m2": self.landmark_density}


def _strip_layout(plan: FlightPlan, camera: CameraModel):
    """(strip, heading, E, N) per image; odd strips fly back south."""
    across = plan.footprint_across_m or footprint_length(camera.width_px, camera.pixel_pitch_um, plan.altitude_m,
                                                         camera.focal_length_mm)
    side = across * (1.0 - plan.side_overlap_pct / 100.0)
    out = []
    for s in range(plan.strip_count):
        north = np.arange(plan.images_per_strip) * plan.spacing_m
        heading = 0.0
        if s % 2:
            north = north[::-1]
            heading = math.pi
        for n in north:
            out.append((s, heading, s * side, float(n)))
    return out


def generate_mission(plan: FlightPlan, camera: CameraModel = None, terrain: TerrainSpec = None,
                     noise: NoiseSpec = None, seed: int = 0, anchor: GeoAnchor = None,
                     landmark_density: float = 0.3) -> Mission:
    """Parallel serpentine strips of nadir images over synthetic terrain.

    Truth poses are nadir with small attitude jitter; navigation poses add
    independent Gaussian position and attitude noise per image. Landmarks
    lie on the DSM surface and are kept when at least two truth footprints
    contain them.
    """
    camera = camera or CameraModel(**MACS_CAMERA)
    terrain = terrain or TerrainSpec()
    noise = noise or NoiseSpec()
    anchor = anchor or DEFAULT_ANCHOR
    if landmark_density <= 0:
        raise InvalidPlan("landmark density must be positive")
    layout = _strip_layout(plan, camera)
    streams = np.random.SeedSequence(seed).spawn(3)
    rng_jitter, rng_nav, rng_lm = (np.random.default_rng(s) for s in streams)

    ids = list(range(len(layout)))
    strip_ids, stamps, truth, nav = {}, {}, {}, {}
    per_strip = plan.images_per_strip * plan.shoot_interval_s + TURN_TIME_S
    jitter_sigma = math.radians(noise.attitude_jitter_deg)
    att_sigma = math.radians(noise.sigma_att_deg)
    for i, (s, heading, e, n) in zip(ids, layout):
        k = i - s * plan.images_per_strip
        strip_ids[i] = s
        stamps[i] = s * per_strip + k * plan.shoot_interval_s
        q = quat_multiply(nadir_rotation(heading), rotation_exp(rng_jitter.normal(0.0, jitter_sigma, 3)))
        t = np.array([e, n, terrain.base_m + plan.altitude_m])
        truth[i] = Pose(q, t)
    for i in ids:
        d_pos = rng_nav.normal(0.0, noise.sigma_pos_m, 3)
        d_att = rng_nav.normal(0.0, att_sigma, 3)
        if noise.sigma_pos_m == 0 and noise.sigma_att_deg == 0:
            nav[i] = truth[i]
        else:
            nav[i] = Pose(quat_multiply(truth[i].rotation, rotation_exp(d_att)), truth[i].translation + d_pos)

    half_diag = 0.5 * math.hypot(plan.footprint_along_m, plan.footprint_across_m or plan.footprint_along_m)
    margin = 1.5 * half_diag + 4 * terrain.cell_size_m
    xs = [t.translation[0] for t in truth.values()]
    ys = [t.translation[1] for t in truth.values()]
    dsm = DsmRaster.from_function(terrain.height, min(xs) - margin, max(xs) + margin, min(ys) - margin,
                                  max(ys) + margin, terrain.cell_size_m)
    footprints = [compute_footprint(camera, truth[i], dsm) for i in ids]
    lo = np.min([f.corners.min(axis=0) for f in footprints], axis=0)
    hi = np.max([f.corners.max(axis=0) for f in footprints], axis=0)
    count = int(round((hi[0] - lo[0]) * (hi[1] - lo[1]) * landmark_density))
    xy = rng_lm.uniform(lo, hi, size=(count, 2))
    seen = np.zeros(count, dtype=np.int64)
    for f in footprints:
        seen += f.contains(xy)
    xy = xy[seen >= 2]
    z = elevation_at(dsm, xy[:, 0], xy[:, 1])
    landmarks = np.column_stack([xy, z])
    return Mission(camera, anchor, dsm, plan, terrain, noise, int(seed), ids, strip_ids, stamps, truth, nav,
                   np.arange(len(landmarks), dtype=np.int64), landmarks, landmark_density)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


TABLE_FIELDS = (
    ("mean_reprojection_error_px", "Mean of Reprojection Error (px)"),
    ("std_reprojection_error_px", "Std-dev of Reprojection Errors (px)"),
    ("feature_extraction_time_s", "Total Feature Extraction Time (sec)"),
    ("matching_time_s", "Total Feature Matching Time (sec)"),
    ("total_runtime_s", "Total Run Time (sec)"),
    ("runtime_per_image_pair_s", "Run Time per Image Pairs (sec)"),
)


@dataclass
class MetricsReport:
    """Accuracy and timing summary of one run.

    The reprojection standard deviation uses the population convention
    (divide by n).
    """

    mean_reprojection_error_px: float
    std_reprojection_error_px: float
    feature_extraction_time_s: float
    matching_time_s: float
    total_runtime_s: float
    runtime_per_image_pair_s: float
    position_rmse_m: float
    attitude_rmse_deg: float
    nav_position_rmse_m: float = float("nan")
    nav_attitude_rmse_deg: float = float("nan")
    inter_strip_error_m: float = float("nan")
    n_images: int = 0
    n_observations: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["std_convention"] = "population"
        return d


def reprojection_stats(norms):
    norms = np.asarray(norms, dtype=float)
    if norms.size == 0:
        return float("nan"), float("nan")
    return float(norms.mean()), float(norms.std())


def position_rmse(poses: dict, truth: dict) -> float:
    d = [np.sum((poses[i].translation - truth[i].translation) ** 2) for i in poses]
    return float(math.sqrt(np.mean(d))) if d else float("nan")


def attitude_rmse_deg(poses: dict, truth: dict) -> float:
    a = [rotation_angle_between(poses[i].rotation, truth[i].rotation) ** 2 for i in poses]
    return float(math.degrees(math.sqrt(np.mean(a)))) if a else float("nan")


def cross_strip_pairs(mission: Mission, threshold=0.10):
    """Image pairs of different strips whose truth footprints overlap."""
    fps = {i: compute_footprint(mission.camera, mission.truth_poses[i], mission.dsm) for i in mission.image_ids}
    pairs = []
    for a in mission.image_ids:
        for b in mission.image_ids:
            if a < b and mission.strip_ids[a] != mission.strip_ids[b] \
                    and footprint_overlap(fps[a], fps[b]) >= threshold:
                pairs.append((a, b))
    return pairs


def inter_strip_error(poses: dict, mission: Mission, pairs=None) -> float:
    """Mean error of the relative position of overlapping cross-strip image pairs."""
    pairs = cross_strip_pairs(mission) if pairs is None else pairs
    errs = []
    for a, b in pairs:
        if a not in poses or b not in poses:
            continue
        est = poses[b].translation - poses[a].translation
        true = mission.truth_poses[b].translation - mission.truth_poses[a].translation
        errs.append(np.linalg.norm(est - true))
    return float(np.mean(errs)) if errs else float("nan")


def evaluate(result, mission: Mission, pairs=None) -> MetricsReport:
    """Metrics of a run (``result.poses``, ``result.residual_norms``, ``result.timings``) against truth."""
    ids = set(result.poses)
    unknown = ids - set(mission.image_ids)
    if unknown:
        raise IdMismatch(f"run has images unknown to the mission: {sorted(unknown)[:10]}")
    mean, std = reprojection_stats(result.residual_norms)
    t = result.timings
    n = len(ids)
    total = float(t.get("total_s", 0.0))
    nav = {i: mission.nav_poses[i] for i in ids}
    return MetricsReport(
        mean, std, float(t.get("feature_extraction_s", 0.0)), float(t.get("matching_s", 0.0)), total,
        total / n if n else float("nan"),
        position_rmse(result.poses, mission.truth_poses), attitude_rmse_deg(result.poses, mission.truth_poses),
        position_rmse(nav, mission.truth_poses), attitude_rmse_deg(nav, mission.truth_poses),
        inter_strip_error(result.poses, mission, pairs), n, int(np.size(result.residual_norms)),
    )
