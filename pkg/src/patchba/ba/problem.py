"""Bundle adjustment problem definition, residuals, robust loss and Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import PointBehindCamera
from ..geometry import (
    DEPTH_EPSILON, CameraModel, Pose, quat_conjugate, quat_multiply, quat_to_matrix, right_jacobian_inv,
    rotation_log, skew,
)

DEFAULT_ROBUST_DELTA_PX = 2.0


@dataclass(frozen=True)
class PosePrior:
    """Soft navigation anchor on a free pose (whitened by the sigmas)."""

    pose: Pose
    sigma_pos_m: float = 1.0
    sigma_att_rad: float = None


@dataclass
class BAProblem:
    camera: CameraModel
    poses: dict
    points: dict
    obs_image: np.ndarray
    obs_track: np.ndarray
    obs_px: np.ndarray
    fixed: frozenset = frozenset()
    priors: dict = field(default_factory=dict)
    robust_delta_px: float = DEFAULT_ROBUST_DELTA_PX

    def __post_init__(self):
        self.obs_image = np.asarray(self.obs_image, dtype=np.int64).reshape(-1)
        self.obs_track = np.asarray(self.obs_track, dtype=np.int64).reshape(-1)
        self.obs_px = np.asarray(self.obs_px, dtype=float).reshape(-1, 2)
        self.fixed = frozenset(self.fixed)
        if not (len(self.obs_image) == len(self.obs_track) == len(self.obs_px)):
            raise ValueError("observation arrays differ in length")
        missing_img = set(np.unique(self.obs_image).tolist()) - set(self.poses)
        missing_pt = set(np.unique(self.obs_track).tolist()) - set(self.points)
        if missing_img or missing_pt:
            raise ValueError(f"observations reference unknown poses {sorted(missing_img)[:5]} "
                             f"or points {sorted(missing_pt)[:5]}")
        if not self.fixed & set(self.poses) and not self.priors:
            raise ValueError("gauge undetermined: fix at least one pose or give pose priors")
        if self.robust_delta_px <= 0:
            raise ValueError("robust_delta_px must be positive")

    @classmethod
    def from_observations(cls, camera, poses, points, observations, **kw):
        """Build from an iterable of ``(image_id, track_id, (u, v))``."""
        obs = list(observations)
        img = [o[0] for o in obs]
        trk = [o[1] for o in obs]
        px = [o[2] for o in obs]
        return cls(camera, dict(poses), dict(points), img, trk, np.array(px, dtype=float).reshape(-1, 2), **kw)

    @property
    def n_observations(self) -> int:
        return len(self.obs_image)


def residual(obs_px, camera: CameraModel, pose: Pose, point) -> np.ndarray:
    """Observed minus projected pixel."""
    xc = pose.world_to_camera(point)
    if xc[2] <= DEPTH_EPSILON:
        raise PointBehindCamera(f"camera-frame depth {xc[2]:.3g} m")
    f = camera.focal_px
    cx, cy = camera.principal_point
    return np.asarray(obs_px, dtype=float) - np.array([f * xc[0] / xc[2] + cx, f * xc[1] / xc[2] + cy])


def robust_loss(s, delta):
    """Huber on the squared norm: ``(value, d value / d s)``."""
    s = np.asarray(s, dtype=float)
    quad = s <= delta * delta
    root = np.sqrt(np.where(quad, 1.0, s))
    value = np.where(quad, s, 2.0 * delta * root - delta * delta)
    deriv = np.where(quad, 1.0, delta / root)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def project_batch(camera: CameraModel, R, T, X):
    """Per-observation camera-frame points and pixels.

    ``R`` (n, 3, 3) world-from-camera, ``T`` (n, 3), ``X`` (n, 3).
    """
    xc = np.einsum("nji,nj->ni", R, X - T)
    z = xc[:, 2]
    zs = np.where(z > DEPTH_EPSILON, z, 1.0)
    f = camera.focal_px
    cx, cy = camera.principal_point
    px = np.column_stack([f * xc[:, 0] / zs + cx, f * xc[:, 1] / zs + cy])
    return xc, px, z > DEPTH_EPSILON


def jacobians_batch(camera: CameraModel, R, xc):
    """Residual Jacobians w.r.t. the pose increment (rotation, translation) and point.

    Rotation increments compose on the right, ``R <- R Exp(d)``.
    """
    f = camera.focal_px
    x, y, z = xc[:, 0], xc[:, 1], np.where(xc[:, 2] > DEPTH_EPSILON, xc[:, 2], 1.0)
    n = len(xc)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = f / z
    Jproj[:, 0, 2] = -f * x / (z * z)
    Jproj[:, 1, 1] = f / z
    Jproj[:, 1, 2] = -f * y / (z * z)
    Rt = np.transpose(R, (0, 2, 1))
    J_rot = -np.einsum("nij,njk->nik", Jproj, skew(xc))
    J_pt = -np.einsum("nij,njk->nik", Jproj, Rt)
    J_cam = np.concatenate([J_rot, -J_pt], axis=2)
    return J_cam, J_pt


def observation_jacobians(camera: CameraModel, pose: Pose, point):
    """Analytic (2x6, 2x3) Jacobians of ``residual`` for one observation."""
    R = pose.R[None]
    xc, _, ok = project_batch(camera, R, pose.translation[None], np.asarray(point, dtype=float)[None])
    if not ok[0]:
        raise PointBehindCamera("point behind camera")
    Jc, Jp = jacobians_batch(camera, R, xc)
    return Jc[0], Jp[0]


def prior_residual(prior: PosePrior, pose: Pose) -> np.ndarray:
    r = [(pose.translation - prior.pose.translation) / prior.sigma_pos_m]
    if prior.sigma_att_rad:
        rel = quat_multiply(quat_conjugate(prior.pose.rotation), pose.rotation)
        r.append(rotation_log(rel) / prior.sigma_att_rad)
    return np.concatenate(r)


def prior_jacobian(prior: PosePrior, pose: Pose) -> np.ndarray:
    """Jacobian of ``prior_residual`` w.r.t. the 6-vector pose increment."""
    J = np.zeros((6 if prior.sigma_att_rad else 3, 6))
    J[0, 3] = J[1, 4] = J[2, 5] = 1.0 / prior.sigma_pos_m
    if prior.sigma_att_rad:
        rel = quat_multiply(quat_conjugate(prior.pose.rotation), pose.rotation)
        J[3:, :3] = right_jacobian_inv(rotation_log(rel)) / prior.sigma_att_rad
    return J


def total_cost(problem: BAProblem, poses=None, points=None) -> float:
    """Robust reprojection cost plus prior terms, evaluated directly."""
    poses = problem.poses if poses is None else poses
    points = problem.points if points is None else points
    cost = 0.0
    for i, t, px in zip(problem.obs_image, problem.obs_track, problem.obs_px):
        r = residual(px, problem.camera, poses[int(i)], points[int(t)])
        cost += robust_loss(float(r @ r), problem.robust_delta_px)[0]
    for i, prior in problem.priors.items():
        if i in problem.fixed or i not in poses:
            continue
        r = prior_residual(prior, poses[i])
        cost += float(r @ r)
    return cost
