"""Patch grids and their propagation between frames.

Two transfer routes move patch centres from one image to the next:

* ``transfer_nav`` back-projects each centre at a nominal depth using the
  navigation pose of the source image and re-projects into the target.
* ``transfer_footprint`` applies an in-plane rotation about the grid centre
  plus the ground displacement between the two DSM footprints.

Patches that leave the image re-enter at the opposite edge
(``wrap_patches``); patches of a neighbouring strip can be injected into
the current image with ``cross_strip_project``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import GridDoesNotFit, NoOverlap, PointBehindCamera
from .geometry import CameraModel, Pose, back_project, project
from .terrain import Footprint, footprint_overlap

MIN_PATCH_SIZE = 16


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_size_px: int
    image_width: int
    image_height: int
    spacing_px: tuple
    grid_center: tuple
    id_offset: int = 0

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def home_center(self, patch_id: int):
        """Grid position a patch was created at."""
        idx = patch_id - self.id_offset
        r, c = divmod(idx, self.cols)
        sx, sy = self.spacing_px
        gx, gy = self.grid_center
        return (gx + (c - (self.cols - 1) / 2.0) * sx, gy + (r - (self.rows - 1) / 2.0) * sy)

    def owns(self, patch_id: int) -> bool:
        return self.id_offset <= patch_id < self.id_offset + self.count

    def to_dict(self):
        return {"rows": self.rows, "cols": self.cols, "patch_size_px": self.patch_size_px,
                "spacing_px": list(self.spacing_px), "grid_center": list(self.grid_center),
                "id_offset": self.id_offset}


@dataclass(frozen=True)
class PatchState:
    patch_id: int
    center_px: tuple
    generation: int = 0
    source_image: int = None  # set on patches injected from another strip
    lost: bool = False

    @property
    def key(self):
        """Identity of the tracked ground region: id plus wrap generation."""
        return (self.patch_id, self.generation)


@dataclass(frozen=True)
class TrackerConfig:
    nominal_depth_m: float = 300.0
    transfer_mode: str = "footprint"
    wrap_enabled: bool = True

    def __post_init__(self):
        if self.nominal_depth_m <= 0:
            raise ValueError("nominal_depth_m must be positive")
        if self.transfer_mode not in ("nav", "footprint"):
            raise ValueError(f"unknown transfer_mode {self.transfer_mode!r}")


def make_grid(rows, cols, patch_size_px, width, height, spacing_px=None, id_offset=0):
    """Block of ``rows x cols`` patches centred in the image.

    ``spacing_px`` is the centre-to-centre distance (scalar or (sx, sy));
    it defaults to the patch size, i.e. a contiguous block.
    """
    if rows < 1 or cols < 1:
        raise GridDoesNotFit("grid needs at least one row and one column")
    if patch_size_px < MIN_PATCH_SIZE:
        raise GridDoesNotFit(f"patch size below {MIN_PATCH_SIZE} px")
    if spacing_px is None:
        spacing_px = patch_size_px
    sx, sy = (spacing_px, spacing_px) if np.isscalar(spacing_px) else spacing_px
    sx, sy = float(sx), float(sy)
    if sx < patch_size_px or sy < patch_size_px:
        raise GridDoesNotFit("spacing smaller than the patch size makes patches overlap")
    block_w = (cols - 1) * sx + patch_size_px
    block_h = (rows - 1) * sy + patch_size_px
    if block_w > width or block_h > height:
        raise GridDoesNotFit(f"{rows}x{cols} grid of {patch_size_px} px does not fit {width}x{height}")
    grid = PatchGrid(rows, cols, int(patch_size_px), int(width), int(height), (sx, sy),
                     (width / 2.0, height / 2.0), int(id_offset))
    states = [PatchState(id_offset + i, grid.home_center(id_offset + i)) for i in range(grid.count)]
    return grid, states


def spread_spacing(rows, cols, width, height):
    """Spacing that distributes the grid evenly over the whole image."""
    return (width / cols, height / rows)


def _reinit(state: PatchState, grid: PatchGrid) -> PatchState:
    return PatchState(state.patch_id, grid.home_center(state.patch_id), state.generation + 1)


def transfer_nav(states, pose_0: Pose, pose_k: Pose, camera: CameraModel, cfg: TrackerConfig,
                 grid: PatchGrid = None):
    """Back-project at the nominal depth from image 0, re-project into image k."""
    out = []
    for s in states:
        ground = back_project(camera, pose_0, s.center_px, cfg.nominal_depth_m)
        try:
            p = project(camera, pose_k, ground)
        except PointBehindCamera:
            out.append(_reinit(s, grid) if grid is not None else replace(s, lost=True))
            continue
        out.append(replace(s, center_px=(float(p[0]), float(p[1])), lost=False))
    return out


def rotation_2d(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def ground_px_scale(fp: Footprint, image_width: int) -> float:
    """Pixels per metre: image width over the length of the top footprint edge."""
    return image_width / float(np.linalg.norm(fp.corners[1] - fp.corners[0]))


def footprint_transform(fp_0: Footprint, fp_k: Footprint, grid: PatchGrid, px_per_m=None):
    """Return (R, c, t) so that a pixel maps as ``R @ (p - c) + c + t``."""
    fp_0.validate()
    fp_k.validate()
    if px_per_m is None:
        px_per_m = ground_px_scale(fp_0, grid.image_width)
    theta = fp_k.heading_rad - fp_0.heading_rad
    x_axis, y_axis = fp_k.image_axes()
    dg = fp_k.center - fp_0.center
    # ground content moves opposite to the footprint, expressed on image k's axes
    t = -px_per_m * np.array([x_axis @ dg, y_axis @ dg])
    return rotation_2d(theta), np.asarray(grid.grid_center, dtype=float), t


def transfer_footprint(states, fp_0: Footprint, fp_k: Footprint, grid: PatchGrid, px_per_m=None):
    R, c, t = footprint_transform(fp_0, fp_k, grid, px_per_m)
    out = []
    for s in states:
        p = R @ (np.asarray(s.center_px) - c) + c + t
        out.append(replace(s, center_px=(float(p[0]), float(p[1])), lost=False))
    return out


def _wrap_axis(v, lo, hi):
    if lo <= v <= hi:
        return v, False
    span = hi - lo
    if span <= 0:
        return lo, True
    return lo + math.fmod(math.fmod(v - lo, span) + span, span), True


def wrap_patches(states, width, height, patch_size):
    """Re-enter patches that left the legal band at the opposite edge, per axis."""
    half = patch_size / 2.0
    out = []
    for s in states:
        x, wx = _wrap_axis(s.center_px[0], half, width - half)
        y, wy = _wrap_axis(s.center_px[1], half, height - half)
        if wx or wy:
            out.append(replace(s, center_px=(x, y), generation=s.generation + 1))
        else:
            out.append(s)
    return out


def patch_ground_positions(states, fp: Footprint, grid: PatchGrid, px_per_m=None):
    """Ground (E, N) of patch centres under the planar footprint model."""
    if px_per_m is None:
        px_per_m = ground_px_scale(fp, grid.image_width)
    x_axis, y_axis = fp.image_axes()
    c = np.asarray(grid.grid_center, dtype=float)
    d = np.array([s.center_px for s in states], dtype=float).reshape(-1, 2) - c
    return fp.center + (np.outer(d[:, 0], x_axis) + np.outer(d[:, 1], y_axis)) / px_per_m


def cross_strip_project(source_states, source_fp: Footprint, target_fp: Footprint, grid: PatchGrid,
                        px_per_m=None, threshold=0.10, source_image=None):
    """Inject neighbour-strip patches that fall inside the target footprint.

    Injected states keep their patch ids and generations; patches whose
    target centre would leave the legal band are omitted.
    """
    overlap = footprint_overlap(source_fp, target_fp)
    if overlap <= 0 or overlap < threshold:
        raise NoOverlap(f"footprint overlap {overlap:.3f} below threshold {threshold}")
    if px_per_m is None:
        px_per_m = ground_px_scale(source_fp, grid.image_width)
    if not source_states:
        return []
    ground = patch_ground_positions(source_states, source_fp, grid, px_per_m)
    inside = target_fp.contains(ground)
    moved = transfer_footprint(source_states, source_fp, target_fp, grid, px_per_m)
    half = grid.patch_size_px / 2.0
    out = []
    for s, m, ok in zip(source_states, moved, inside):
        if not ok:
            continue
        x, y = m.center_px
        if not (half <= x <= grid.image_width - half and half <= y <= grid.image_height - half):
            continue
        src = source_image if source_image is not None else s.source_image
        out.append(PatchState(s.patch_id, (x, y), s.generation, src))
    return out
