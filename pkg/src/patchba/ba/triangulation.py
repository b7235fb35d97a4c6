"""Linear multi-view triangulation (least-squares ray midpoint)."""

from __future__ import annotations

import numpy as np

from ..errors import BehindCamera, DegenerateBaseline
from ..geometry import DEPTH_EPSILON, CameraModel, pixel_rays

MIN_BASELINE_M = 1e-6
MIN_RAY_ANGLE_RAD = 1e-6


def triangulate(observations, poses, camera: CameraModel) -> np.ndarray:
    """Point closest (in squared distance) to all viewing rays.

    ``observations`` is a sequence of ``(image_id, (u, v))``; ``poses`` maps
    image ids to poses.
    """
    obs = list(observations)
    if len(obs) < 2:
        raise DegenerateBaseline("need at least two observations")
    centers = np.array([poses[i].translation for i, _ in obs])
    rays = np.array([pixel_rays(camera, poses[i], np.asarray(px, dtype=float)[None])[0] for i, px in obs])
    return _solve(centers, rays)


def _solve(centers, rays):
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    if spread < MIN_BASELINE_M:
        raise DegenerateBaseline("camera centres coincide")
    cosines = np.clip(rays @ rays.T, -1.0, 1.0)
    if np.arccos(cosines.min()) < MIN_RAY_ANGLE_RAD:
        raise DegenerateBaseline("viewing rays are parallel")
    P = np.eye(3)[None] - rays[:, :, None] * rays[:, None, :]
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, centers)
    X = np.linalg.solve(A, b)
    depth = np.einsum("ni,ni->n", X[None] - centers, rays)
    if np.any(depth <= DEPTH_EPSILON):
        raise BehindCamera("triangulated point lies behind a camera")
    return X


def triangulate_many(tracks, poses, camera: CameraModel):
    """Triangulate every track whose images all have poses.

    Returns ``{track_id: point}``; degenerate or behind-camera tracks are
    skipped. Tracks are solved together; the few that look close to
    degenerate go through ``triangulate`` one by one.
    """
    usable = [t for t in tracks if len(t) >= 2 and all(i in poses for i in t.image_ids)]
    if not usable:
        return {}
    lengths = np.array([len(t) for t in usable])
    starts = np.r_[0, np.cumsum(lengths)[:-1]]
    owner = np.repeat(np.arange(len(usable)), lengths)
    img = np.concatenate([t.image_ids for t in usable])
    px = np.concatenate([np.asarray(t.pixels, dtype=float).reshape(-1, 2) for t in usable])
    rays = np.empty((len(img), 3))
    centers = np.empty((len(img), 3))
    for i in np.unique(img):
        sel = img == i
        rays[sel] = pixel_rays(camera, poses[int(i)], px[sel])
        centers[sel] = poses[int(i)].translation
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    mean = np.add.reduceat(centers, starts, axis=0) / lengths[:, None]
    spread = np.maximum.reduceat(np.linalg.norm(centers - mean[owner], axis=1), starts)
    to_first = np.arccos(np.clip(np.einsum("ni,ni->n", rays, rays[starts][owner]), -1.0, 1.0))
    near_parallel = np.maximum.reduceat(to_first, starts) < 2 * MIN_RAY_ANGLE_RAD
    doubtful = near_parallel | (spread < MIN_BASELINE_M)
    P = np.eye(3)[None] - rays[:, :, None] * rays[:, None, :]
    A = np.add.reduceat(P, starts, axis=0)
    b = np.add.reduceat((P @ centers[:, :, None])[:, :, 0], starts, axis=0)
    X = np.full((len(usable), 3), np.nan)
    ok = ~doubtful
    X[ok] = np.linalg.solve(A[ok], b[ok][:, :, None])[:, :, 0]
    depth = np.einsum("ni,ni->n", X[owner] - centers, rays)
    in_front = np.minimum.reduceat(np.nan_to_num(depth, nan=-np.inf), starts) > DEPTH_EPSILON
    out = {}
    for k, t in enumerate(usable):
        if doubtful[k]:
            try:
                out[t.track_id] = triangulate(t.observations, poses, camera)
            except (DegenerateBaseline, BehindCamera, np.linalg.LinAlgError):
                pass
        elif in_front[k]:
            out[t.track_id] = X[k]
    return out
