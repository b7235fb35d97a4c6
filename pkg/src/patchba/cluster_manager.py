"""Sliding clusters with cross-strip injection, fixed-pose handoff and pose fusion."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ba.strategies import SolveSettings, StepRecord, partition_stream, solve_image_set
from .errors import AntipodalRotations, ConfigError, InsufficientImages, MissingPose
from .geometry import Pose, quat_conjugate, quat_multiply, quat_normalize, rotation_angle_between, rotation_exp, \
    rotation_log
from .terrain import footprint_overlap

CARRYOVER_FRACTION = 0.25
OVERLAP_THRESHOLD = 0.10


@dataclass(frozen=True)
class Cluster:
    index: int
    image_ids: tuple       # carryover followed by new images, acquisition order
    new_ids: tuple
    fixed_ids: tuple
    fusion_ids: tuple
    injected_ids: tuple
    M: int

    @property
    def carryover(self) -> tuple:
        return self.fixed_ids + self.fusion_ids

    @property
    def all_ids(self) -> tuple:
        return self.image_ids + self.injected_ids

    def to_dict(self):
        return {"index": self.index, "image_ids": list(self.image_ids), "new_ids": list(self.new_ids),
                "fixed_ids": list(self.fixed_ids), "fusion_ids": list(self.fusion_ids),
                "injected_ids": list(self.injected_ids), "M": self.M}


@dataclass(frozen=True)
class FusionWeights:
    omega_old: float
    omega_new: float

    def __post_init__(self):
        if self.omega_old < 0 or self.omega_new < 0 or self.omega_old + self.omega_new <= 0:
            raise ValueError("fusion weights must be non-negative with a positive sum")


def carryover_count(M: int, fraction: float = CARRYOVER_FRACTION) -> int:
    return math.ceil(fraction * M)


def split_carryover(carry):
    """First half (rounded up) fixed, the rest fused."""
    carry = tuple(carry)
    n_fixed = math.ceil(len(carry) / 2)
    return carry[:n_fixed], carry[n_fixed:]


def injected_images(members, order, strip_of: dict, footprints: dict, threshold=OVERLAP_THRESHOLD):
    """Earlier images of other strips overlapping any member, acquisition order."""
    members = list(members)
    member_set = set(members)
    pos = {i: k for k, i in enumerate(order)}
    last = max(pos[i] for i in members)
    out = []
    for cand in order[:last]:
        if cand in member_set:
            continue
        for m in members:
            if strip_of[m] == strip_of[cand]:
                continue
            if footprint_overlap(footprints[cand], footprints[m]) >= threshold:
                out.append(cand)
                break
    return tuple(out)


def form_clusters(order, M: int, strip_of: dict = None, footprints: dict = None, overlap=CARRYOVER_FRACTION,
                  threshold=OVERLAP_THRESHOLD, inject=True):
    """Clusters of M new images each, prefixed by the previous cluster's carryover."""
    if M < 4:
        raise ConfigError(f"cluster size M must be at least 4, got {M}")
    order = list(order)
    if len(set(order)) != len(order):
        raise ValueError("image ids in the stream must be unique")
    if len(order) < M:
        warnings.warn(f"{len(order)} images is fewer than M={M}; emitting a single cluster", InsufficientImages)
    n_carry = carryover_count(M, overlap)
    strip_of = strip_of or {i: 0 for i in order}
    clusters = []
    for k, members in enumerate(partition_stream(order, M, n_carry)):
        carry = tuple(members[:n_carry]) if k else ()
        fixed, fusion = split_carryover(carry)
        new = tuple(members[len(carry):])
        injected = ()
        if inject and footprints is not None:
            injected = injected_images(members, order, strip_of, footprints, threshold)
        clusters.append(Cluster(k, tuple(members), new, fixed, fusion, injected, M))
    return clusters


@dataclass
class ClusterInit:
    poses: dict
    fixed_ids: frozenset
    fusion_ids: tuple


def handoff(prev_poses: dict, cluster: Cluster, nav_poses: dict, optimized: dict = None) -> ClusterInit:
    """Initial poses and fixed set for the next cluster.

    Carried-over images start from ``prev_poses`` (fixed half and fused
    half). Injected images reuse their optimized pose when there is one and
    are then fixed; new images start from navigation.
    """
    optimized = optimized or {}
    poses = {}
    fixed = set()
    for i in cluster.carryover:
        if i not in prev_poses:
            raise MissingPose(f"carryover image {i} has no pose in the previous cluster")
        poses[i] = prev_poses[i]
    fixed.update(cluster.fixed_ids)
    for i in cluster.new_ids:
        poses[i] = nav_poses[i]
    for i in cluster.injected_ids:
        if i in optimized:
            poses[i] = optimized[i]
            fixed.add(i)
        else:
            poses[i] = nav_poses[i]
    return ClusterInit(poses, frozenset(fixed), cluster.fusion_ids)


def fuse_pose(p_old: Pose, p_new: Pose, w: FusionWeights) -> Pose:
    """Match-count weighted average of two estimates of one pose.

    Translations are averaged arithmetically. Rotations are interpolated
    along the geodesic joining them at the weight fraction, which is the
    weighted rotation mean of two rotations.
    """
    if w.omega_new == 0:
        return p_old
    if w.omega_old == 0:
        return p_new
    gap = rotation_angle_between(p_old.rotation, p_new.rotation)
    if gap >= math.pi / 2:
        raise AntipodalRotations(f"rotations differ by {math.degrees(gap):.1f} deg")
    total = w.omega_old + w.omega_new
    t = (w.omega_old * p_old.translation + w.omega_new * p_new.translation) / total
    # interpolate from the lower-weighted side so swapping the arguments is symmetric
    if (w.omega_new, tuple(p_new.rotation)) > (w.omega_old, tuple(p_old.rotation)):
        base, other, frac = p_old.rotation, p_new.rotation, w.omega_new / total
    else:
        base, other, frac = p_new.rotation, p_old.rotation, w.omega_old / total
    delta = rotation_log(quat_multiply(quat_conjugate(base), other))
    q = quat_normalize(quat_multiply(base, rotation_exp(frac * delta)))
    if q[0] < 0:
        q = -q
    return Pose(q, t)


@dataclass
class ClusterLog:
    cluster: Cluster
    fusion_weights: dict = field(default_factory=dict)
    fusion_deltas: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def to_dict(self):
        d = self.cluster.to_dict()
        d["fusion_weights"] = {str(k): [v.omega_old, v.omega_new] for k, v in self.fusion_weights.items()}
        d["fusion_deltas"] = {str(k): v for k, v in self.fusion_deltas.items()}
        d["solve"] = self.stats
        return d


@dataclass
class ProposedRun:
    poses: dict
    records: list
    logs: list


def run_proposed(camera, clusters, feature_sets: dict, matcher, nav_poses: dict, settings: SolveSettings = None):
    """Solve the clusters in order, handing poses from one to the next.

    ``matcher(a, b)`` returns PairMatches for two images (or None when the
    pair shares no patches). Only pairs with at least one non-injected
    member are matched.
    """
    settings = settings or SolveSettings()
    optimized = {}
    inliers = {}
    records, logs = [], []
    for cluster in clusters:
        init = handoff(optimized, cluster, nav_poses, optimized)
        ids = list(cluster.all_ids)
        members = set(cluster.image_ids)
        matches = []
        for a_k, a in enumerate(ids):
            for b in ids[a_k + 1:]:
                if a not in members and b not in members:
                    continue
                m = matcher(a, b)
                if m is not None and len(m):
                    matches.append(m)
        rec = solve_image_set(camera, ids, feature_sets, matches, init.poses, nav_poses, init.fixed_ids, settings,
                              label=f"cluster {cluster.index}")
        records.append(rec)
        counts = rec.result.inlier_counts()
        log = ClusterLog(cluster, stats=rec.result.stats())
        for i in cluster.image_ids:
            if i in cluster.fixed_ids:
                continue
            new_pose = rec.result.poses[i]
            if i in cluster.fusion_ids:
                w = FusionWeights(inliers.get(i, 0), counts.get(i, 0))
                if w.omega_old + w.omega_new == 0:
                    w = FusionWeights(1, 1)
                fused = fuse_pose(optimized[i], new_pose, w)
                log.fusion_weights[i] = w
                log.fusion_deltas[i] = {
                    "old_to_new_m": float(np.linalg.norm(new_pose.translation - optimized[i].translation)),
                    "old_to_fused_m": float(np.linalg.norm(fused.translation - optimized[i].translation)),
                    "old_to_new_deg": math.degrees(rotation_angle_between(optimized[i].rotation,
                                                                          new_pose.rotation)),
                }
                new_pose = fused
            optimized[i] = new_pose
            inliers[i] = counts.get(i, 0)
        for i in cluster.injected_ids:
            if i not in init.fixed_ids:
                optimized[i] = rec.result.poses[i]
                inliers[i] = counts.get(i, 0)
        logs.append(log)
    return ProposedRun(optimized, records, logs)
