"""DSM rasters, ray casting onto terrain, image footprints and footprint overlap."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CornerMiss, DegenerateFootprint, NoDataCell, NoIntersection, OutOfExtent
from .geometry import CameraModel, Pose, pixel_rays

DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class DsmRaster:
    """Elevation grid in the mission ENU frame.

    ``origin`` is the lower-left corner of the lower-left cell; elevations are
    sampled at cell centres. ``elevations[row, col]`` has row 0 at the south
    edge (the ASCII grid file stores rows north-first).
    """

    origin: tuple
    cell_size: float
    elevations: np.ndarray
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        z = np.array(self.elevations, dtype=float)
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
            raise ValueError("DSM needs at least 2x2 cells")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        valid = z != self.nodata
        if not np.all(np.isfinite(z[valid])):
            raise ValueError("non-finite elevation in DSM")
        z.flags.writeable = False
        object.__setattr__(self, "elevations", z)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_rows(self) -> int:
        return self.elevations.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevations.shape[1]

    @property
    def node_origin(self):
        h = 0.5 * self.cell_size
        return self.origin[0] + h, self.origin[1] + h

    @property
    def extent(self):
        """(xmin, xmax, ymin, ymax) of the interpolable area (cell centres)."""
        x0, y0 = self.node_origin
        return (x0, x0 + (self.n_cols - 1) * self.cell_size,
                y0, y0 + (self.n_rows - 1) * self.cell_size)

    @property
    def max_elevation(self) -> float:
        z = self.elevations
        return float(z[z != self.nodata].max())

    def contains(self, x, y):
        xmin, xmax, ymin, ymax = self.extent
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    @classmethod
    def from_function(cls, fn, xmin, xmax, ymin, ymax, cell_size, nodata=DEFAULT_NODATA):
        """Sample ``fn(x, y)`` at the cell centres covering the box."""
        n_cols = int(math.ceil((xmax - xmin) / cell_size)) + 2
        n_rows = int(math.ceil((ymax - ymin) / cell_size)) + 2
        origin = (xmin - cell_size, ymin - cell_size)
        xs = origin[0] + (np.arange(n_cols) + 0.5) * cell_size
        ys = origin[1] + (np.arange(n_rows) + 0.5) * cell_size
        X, Y = np.meshgrid(xs, ys)
        return cls(origin, cell_size, fn(X, Y), nodata)


def elevation_at(dsm: DsmRaster, x, y):
    """Bilinear elevation. Scalars in, float out; arrays in, array out."""
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(dsm.contains(x, y)):
        raise OutOfExtent("query outside DSM extent")
    x0, y0 = dsm.node_origin
    fx = (x - x0) / dsm.cell_size
    fy = (y - y0) / dsm.cell_size
    i = np.clip(np.floor(fx).astype(int), 0, dsm.n_cols - 2)
    j = np.clip(np.floor(fy).astype(int), 0, dsm.n_rows - 2)
    tx = fx - i
    ty = fy - j
    z = dsm.elevations
    z00, z10 = z[j, i], z[j, i + 1]
    z01, z11 = z[j + 1, i], z[j + 1, i + 1]
    if np.any(np.stack([z00, z10, z01, z11]) == dsm.nodata):
        raise NoDataCell("query touches a nodata cell")
    out = (z00 * (1 - tx) * (1 - ty) + z10 * tx * (1 - ty)
           + z01 * (1 - tx) * ty + z11 * tx * ty)
    return float(out[0]) if scalar else out


def ray_intersect(dsm: DsmRaster, origin, direction, tol: float = 0.01) -> np.ndarray:
    """First intersection of a descending ray with the terrain surface.

    Marches at half the cell size, then bisects the bracketing interval.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    if d[2] >= 0:
        raise NoIntersection("ray does not descend")

    def height_above(t):
        p = o + t * d
        if not dsm.contains(p[0], p[1]):
            return None
        return p[2] - elevation_at(dsm, p[0], p[1])

    # skip the empty space above the highest terrain point
    t = max(0.0, (o[2] - dsm.max_elevation) / -d[2] - dsm.cell_size)
    h = height_above(t)
    if h is None:
        raise NoIntersection("ray leaves the DSM before reaching the terrain")
    if h < 0:
        if t == 0.0:
            raise NoIntersection("ray origin lies below the terrain")
        t = 0.0
        h = height_above(t)
    step = 0.5 * dsm.cell_size
    while True:
        t_next = t + step
        h_next = height_above(t_next)
        if h_next is None:
            raise NoIntersection("ray leaves the DSM before reaching the terrain")
        if h_next <= 0:
            break
        t, h = t_next, h_next
    lo, hi = t, t_next
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        hm = height_above(mid)
        if hm > 0:
            lo = mid
        else:
            hi = mid
        if abs(hm) < 0.1 * tol:
            return o + mid * d
    return o + hi * d


# ---------------------------------------------------------------------------
# footprints
# ---------------------------------------------------------------------------


def polygon_area(poly) -> float:
    """Signed shoelace area (counter-clockwise positive)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_convex(poly) -> bool:
    p = np.asarray(poly, dtype=float)
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross > 0) or np.all(cross < 0))


@dataclass(frozen=True)
class Footprint:
    """Ground plan of the four image-corner projections (TL, TR, BR, BL)."""

    corners: np.ndarray
    center: np.ndarray
    heading_rad: float

    @classmethod
    def from_corners(cls, corners) -> "Footprint":
        c = np.array(corners, dtype=float)[:, :2]
        if c.shape != (4, 2):
            raise ValueError("a footprint has exactly four corners")
        c.flags.writeable = False
        center = c.mean(axis=0)
        center.flags.writeable = False
        top = 0.5 * (c[0] + c[1])
        bottom = 0.5 * (c[3] + c[2])
        v = top - bottom
        # image-up direction, counter-clockwise from north
        heading = math.atan2(-v[0], v[1])
        return cls(c, center, heading)

    # corners are read-only, so derived quantities are computed once
    @cached_property
    def area(self) -> float:
        return abs(polygon_area(self.corners))

    @cached_property
    def _ccw(self) -> np.ndarray:
        return self.corners if polygon_area(self.corners) > 0 else self.corners[::-1]

    @cached_property
    def _well_formed(self) -> bool:
        return self.area > 0 and is_convex(self.corners)

    def ccw_corners(self) -> np.ndarray:
        return self._ccw

    def validate(self):
        if not self._well_formed:
            raise DegenerateFootprint("footprint is not a convex quadrilateral with positive area")
        return self

    def image_axes(self):
        """Ground unit vectors of the image x (right) and y (down) axes."""
        c, s = math.cos(self.heading_rad), math.sin(self.heading_rad)
        return np.array([c, s]), np.array([s, -c])

    def contains(self, points) -> np.ndarray:
        return points_in_convex_polygon(points, self.ccw_corners())


def image_corner_pixels(camera: CameraModel) -> np.ndarray:
    w, h = camera.width_px, camera.height_px
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def compute_footprint(camera: CameraModel, pose: Pose, dsm: DsmRaster) -> Footprint:
    rays = pixel_rays(camera, pose, image_corner_pixels(camera))
    corners = []
    for idx, ray in enumerate(rays):
        try:
            corners.append(ray_intersect(dsm, pose.translation, ray))
        except NoIntersection as exc:
            raise CornerMiss(idx) from exc
    return Footprint.from_corners(np.array(corners)[:, :2])


# ---------------------------------------------------------------------------
# convex polygon clipping
# ---------------------------------------------------------------------------


def points_in_convex_polygon(points, ccw_poly) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.asarray(ccw_poly, dtype=float)
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= 0
    return inside


def clip_convex(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by convex ``clip`` (both CCW)."""
    output = [np.asarray(p, dtype=float) for p in subject]
    clip = np.asarray(clip, dtype=float)
    for a, b in zip(clip, np.roll(clip, -1, axis=0)):
        if not output:
            break
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
                output.append(cur)
            elif s_prev >= 0:
                output.append(prev + (cur - prev) * (s_prev / (s_prev - s_cur)))
            prev, s_prev = cur, s_cur
    return np.array(output) if output else np.zeros((0, 2))


def intersection_area(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if polygon_area(a) < 0:
        a = a[::-1]
    if polygon_area(b) < 0:
        b = b[::-1]
    return abs(polygon_area(clip_convex(a, b)))


def footprint_overlap(a: Footprint, b: Footprint) -> float:
    """Intersection area over the smaller footprint area."""
    a.validate()
    b.validate()
    # cheap bounding-box rejection
    if (a.corners[:, 0].max() < b.corners[:, 0].min() or b.corners[:, 0].max() < a.corners[:, 0].min()
            or a.corners[:, 1].max() < b.corners[:, 1].min()
            or b.corners[:, 1].max() < a.corners[:, 1].min()):
        return 0.0
    inter = abs(polygon_area(clip_convex(a.ccw_corners(), b.ccw_corners())))
    return min(1.0, inter / min(a.area, b.area))
