"""Camera model, rigid poses, pinhole projection, SO(3) helpers and WGS84 frames.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)`` and describe the world-from-camera
  rotation, so a camera-frame vector ``v`` maps to world as ``R @ v``.
* Camera frame: x to the image right, y to the image bottom, z along the
  optical axis.
* The mission frame is a local East-North-Up tangent plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, PointBehindCamera

DEPTH_EPSILON = 1e-6

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)
WGS84_B = WGS84_A * (1.0 - WGS84_F)


def _frozen(a, shape=None):
    arr = np.array(a, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraModel:
    focal_length_mm: float
    pixel_pitch_um: float
    width_px: int
    height_px: int
    principal_point: tuple = None

    def __post_init__(self):
        if self.focal_length_mm <= 0 or self.pixel_pitch_um <= 0:
            raise ValueError("focal length and pixel pitch must be positive")
        if self.width_px < 2 or self.height_px < 2:
            raise ValueError("image must be at least 2x2 pixels")
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (self.width_px / 2.0, self.height_px / 2.0))
        cx, cy = (float(v) for v in self.principal_point)
        if not (0 <= cx < self.width_px and 0 <= cy < self.height_px):
            raise ValueError("principal point outside the image")
        object.__setattr__(self, "principal_point", (cx, cy))

    @property
    def focal_px(self) -> float:
        return self.focal_length_mm * 1000.0 / self.pixel_pitch_um

    @property
    def K(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        f = self.focal_px
        cx, cy = self.principal_point
        return np.array([[1.0 / f, 0.0, -cx / f], [0.0, 1.0 / f, -cy / f], [0.0, 0.0, 1.0]])

    @classmethod
    def from_focal_px(cls, focal_px, width_px, height_px, principal_point=None, pixel_pitch_um=1.0):
        return cls(focal_px * pixel_pitch_um / 1000.0, pixel_pitch_um, width_px, height_px, principal_point)

    def to_dict(self) -> dict:
        return {
            "focal_length_mm": self.focal_length_mm,
            "pixel_pitch_um": self.pixel_pitch_um,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "principal_point": list(self.principal_point),
        }

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        pp = d.get("principal_point")
        return cls(float(d["focal_length_mm"]), float(d["pixel_pitch_um"]), int(d["width_px"]),
                   int(d["height_px"]), tuple(pp) if pp is not None else None)


# ---------------------------------------------------------------------------
# quaternions and SO(3)
# ---------------------------------------------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def quat_to_matrix(q):
    """Rotation matrix (or stack of matrices) from unit quaternion(s)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_exp(axis_angle):
    """Unit quaternion(s) for axis-angle vector(s) in radians."""
    v = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    # sin(theta/2)/theta, series below 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    q = np.concatenate([np.cos(half), k * v], axis=-1)
    return q


def rotation_log(rotation):
    """Axis-angle vector of a quaternion (or 3x3 matrix).

    At pi (to rounding) the axis sign is ambiguous; the axis whose largest-magnitude
    component is positive is returned.
    """
    q = np.asarray(rotation, dtype=float)
    if q.shape == (3, 3):
        q = matrix_to_quat(q)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / w
    angle = 2.0 * math.atan2(s, w)
    axis = v / s
    if w < 1e-15 and axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return angle * axis


def skew(v):
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


def right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3) at ``phi`` (single 3-vector)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 12.0
    c = 1.0 / theta ** 2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * W + c * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Camera orientation (world-from-camera quaternion) and ENU centre."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        if q.shape == (3, 3):
            q = matrix_to_quat(q)
        n = np.linalg.norm(q)
        # leave unit quaternions untouched so serialisation round trips are exact
        if abs(n - 1.0) > 8 * np.finfo(float).eps:
            q = q / n
        object.__setattr__(self, "rotation", _frozen(q, (4,)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def retract(self, delta) -> "Pose":
        """Apply a 6-vector update (rotation increment in camera frame, then translation)."""
        delta = np.asarray(delta, dtype=float)
        q = quat_multiply(self.rotation, rotation_exp(delta[:3]))
        return Pose(q, self.translation + delta[3:])

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=float) - self.translation) @ self.R

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def nadir_rotation(heading_rad: float = 0.0):
    """Quaternion of a downward-looking camera.

    ``heading_rad`` is the direction of the image-up axis on the ground,
    counter-clockwise from north (0 = image top points north).
    """
    c, s = math.cos(heading_rad), math.sin(heading_rad)
    x_axis = [c, s, 0.0]
    y_axis = [s, -c, 0.0]
    z_axis = [0.0, 0.0, -1.0]
    return matrix_to_quat(np.column_stack([x_axis, y_axis, z_axis]))


def rotate_world(q, axis_angle):
    """Pre-multiply a world-from-camera quaternion by a world-frame rotation."""
    return quat_normalize(quat_multiply(rotation_exp(axis_angle), q))


def rotation_angle_between(qa, qb) -> float:
    """Geodesic angle (radians) between two orientations."""
    # atan2 of the relative quaternion keeps precision near zero, where acos loses it
    rel = quat_multiply(quat_conjugate(quat_normalize(qa)), quat_normalize(qb))
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project(camera: CameraModel, pose: Pose, point) -> np.ndarray:
    xc = pose.world_to_camera(point)
    if xc[2] <= DEPTH_EPSILON:
        raise PointBehindCamera(f"camera-frame depth {xc[2]:.3g} m")
    f = camera.focal_px
    cx, cy = camera.principal_point
    return np.array([f * xc[0] / xc[2] + cx, f * xc[1] / xc[2] + cy])


def project_points(camera: CameraModel, pose: Pose, points):
    """Vectorised projection. Returns ``(pixels, depth)``; callers test depth."""
    xc = pose.world_to_camera(np.atleast_2d(points))
    z = xc[:, 2]
    safe = np.where(z > DEPTH_EPSILON, z, np.nan)
    f = camera.focal_px
    cx, cy = camera.principal_point
    px = np.column_stack([f * xc[:, 0] / safe + cx, f * xc[:, 1] / safe + cy])
    return px, z


def pixel_rays(camera: CameraModel, pose: Pose, pixels):
    """World-frame ray directions (camera-frame z = 1) through pixels."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    h = np.column_stack([pixels, np.ones(len(pixels))])
    return (h @ camera.K_inv.T) @ pose.R.T


def back_project(camera: CameraModel, pose: Pose, pixel, depth: float) -> np.ndarray:
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    ray = pixel_rays(camera, pose, pixel)[0]
    return pose.translation + depth * ray


# ---------------------------------------------------------------------------
# WGS84 geodetic / ECEF / ENU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeoAnchor:
    latitude_deg: float
    longitude_deg: float
    altitude_m: float = 0.0

    def __post_init__(self):
        if abs(self.latitude_deg) > 90 or abs(self.longitude_deg) > 180:
            raise ValueError("anchor latitude/longitude out of range")

    def to_dict(self):
        return {"latitude_deg": self.latitude_deg, "longitude_deg": self.longitude_deg,
                "altitude_m": self.altitude_m}


def geodetic_to_ecef(lat_deg, lon_deg, alt_m):
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    x = (n + alt_m) * cl * np.cos(lon)
    y = (n + alt_m) * cl * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + alt_m) * sl
    return np.stack([x, y, z], axis=-1)


def ecef_to_geodetic(ecef):
    """Iterative inversion; converges to sub-micrometre in a few steps."""
    ecef = np.asarray(ecef, dtype=float)
    x, y, z = ecef[..., 0], ecef[..., 1], ecef[..., 2]
    p = np.hypot(x, y)
    lon = np.arctan2(y, x)
    lat = np.arctan2(z, p * (1.0 - WGS84_E2))
    for _ in range(10):
        sl = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
        lat = np.arctan2(z + WGS84_E2 * n * sl, p)
    sl, cl = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sl * sl)
    # height formula stable away from the poles; fall back near them
    alt = np.where(np.abs(cl) > 1e-8, p / np.where(np.abs(cl) > 1e-8, cl, 1.0) - n,
                   np.abs(z) - WGS84_B)
    return np.degrees(lat), np.degrees(lon), alt


def _enu_basis(anchor: GeoAnchor):
    lat = math.radians(anchor.latitude_deg)
    lon = math.radians(anchor.longitude_deg)
    sl, cl, so, co = math.sin(lat), math.cos(lat), math.sin(lon), math.cos(lon)
    # rows: east, north, up expressed in ECEF
    return np.array([[-so, co, 0.0], [-sl * co, -sl * so, cl], [cl * co, cl * so, sl]])


def ecef_to_enu(ecef, anchor: GeoAnchor):
    origin = geodetic_to_ecef(anchor.latitude_deg, anchor.longitude_deg, anchor.altitude_m)
    return (np.asarray(ecef, dtype=float) - origin) @ _enu_basis(anchor).T


def enu_to_ecef(enu, anchor: GeoAnchor):
    origin = geodetic_to_ecef(anchor.latitude_deg, anchor.longitude_deg, anchor.altitude_m)
    return np.asarray(enu, dtype=float) @ _enu_basis(anchor) + origin


def geodetic_to_enu(lat_deg, lon_deg, alt_m, anchor: GeoAnchor):
    return ecef_to_enu(geodetic_to_ecef(lat_deg, lon_deg, alt_m), anchor)


def enu_to_geodetic(enu, anchor: GeoAnchor):
    return ecef_to_geodetic(enu_to_ecef(enu, anchor))
