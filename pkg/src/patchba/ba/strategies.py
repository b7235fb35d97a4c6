"""Solving image sets from feature tracks, plus the two incremental baselines.

``solve_image_set`` is the one-shot solve shared by the global and
clustered modes. ``run_incremental`` grows a track list one image at a
time, matching each image against its predecessor only, and re-solves the
whole problem at every step. ``run_cluster_incremental`` does the same
inside sliding clusters, restarting the track list at every cluster and
holding the carried-over images fixed as references.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, RegistrationFailure, WeakRegistration
from ..features import Track, build_tracks
from ..geometry import CameraModel, Pose
from .problem import DEFAULT_ROBUST_DELTA_PX, BAProblem, PosePrior
from .solver import BAResult, LMOptions, solve
from .triangulation import triangulate_many

MIN_MATCHES = 15


@dataclass
class SolveSettings:
    robust_delta_px: float = DEFAULT_ROBUST_DELTA_PX
    sigma_pos_m: float = 1.0
    sigma_att_rad: float = math.radians(0.2)
    min_matches: int = MIN_MATCHES
    weak_links: str = "raise"   # or "nav": keep the image, initialised from navigation
    lm: LMOptions = field(default_factory=LMOptions)

    def __post_init__(self):
        if self.weak_links not in ("raise", "nav"):
            raise ConfigError(f"weak_links must be 'raise' or 'nav', got {self.weak_links!r}")


@dataclass
class StepRecord:
    """One call of the solver: which images it saw and what it returned."""

    image_ids: tuple
    fixed_ids: tuple
    result: BAResult
    tracks: list
    label: str = ""


def build_problem(camera: CameraModel, tracks, init_poses: dict, nav_poses: dict, fixed, settings: SolveSettings,
                  init_points: dict = None):
    """BAProblem over ``init_poses``; tracks lacking an initial point are triangulated.

    Free poses receive navigation priors. Returns the problem and the
    tracks that entered it.
    """
    init_points = dict(init_points or {})
    missing = [t for t in tracks if t.track_id not in init_points]
    init_points.update(triangulate_many(missing, init_poses, camera))
    used = [t for t in tracks if t.track_id in init_points and all(i in init_poses for i in t.image_ids)]
    img, trk, px = [], [], []
    for t in used:
        img.extend(t.image_ids)
        trk.extend([t.track_id] * len(t))
        px.append(t.pixels)
    px = np.concatenate(px) if px else np.zeros((0, 2))
    fixed = frozenset(i for i in fixed if i in init_poses)
    priors = {i: PosePrior(nav_poses[i], settings.sigma_pos_m, settings.sigma_att_rad)
              for i in init_poses if i not in fixed}
    points = {t.track_id: init_points[t.track_id] for t in used}
    problem = BAProblem(camera, dict(init_poses), points, img, trk, px, fixed, priors, settings.robust_delta_px)
    return problem, used


def solve_image_set(camera, image_ids, feature_sets: dict, matches, init_poses: dict, nav_poses: dict,
                    fixed=(), settings: SolveSettings = None, require_free=True, label="") -> StepRecord:
    """Build tracks over ``image_ids`` from ``matches`` and run one solve.

    With ``require_free`` only tracks seen by at least one free image are
    kept; tracks among fixed images carry no information.
    """
    settings = settings or SolveSettings()
    ids = list(image_ids)
    fixed = frozenset(fixed)
    tracks = build_tracks([feature_sets[i] for i in ids], matches)
    if require_free:
        tracks = [t for t in tracks if any(i not in fixed for i in t.image_ids)]
    poses = {i: init_poses[i] for i in ids}
    problem, used = build_problem(camera, tracks, poses, nav_poses, fixed, settings)
    result = solve(problem, settings.lm)
    return StepRecord(tuple(ids), tuple(sorted(fixed)), result, used, label)


# ---------------------------------------------------------------------------
# incremental baselines
# ---------------------------------------------------------------------------


@dataclass
class IncrementalRun:
    poses: dict
    records: list
    tracks: list
    points: dict
    step_times: list
    weak_links: list = field(default_factory=list)   # (image, matches) pairs below min_matches


class _TrackList:
    """Tracks grown by consecutive matches; keyed by their first observation."""

    def __init__(self):
        self.owner = {}
        self.members = {}

    def extend(self, m):
        for a, b in zip(m.idx_a.tolist(), m.idx_b.tolist()):
            key = self.owner.get((m.image_a, a))
            if key is None:
                key = (m.image_a, a)
                self.owner[key] = key
                self.members[key] = [(m.image_a, a)]
            self.owner[(m.image_b, b)] = key
            self.members[key].append((m.image_b, b))

    def tracks(self, feature_sets):
        out = []
        ids = {}
        for key in sorted(self.members):
            obs = self.members[key]
            tid = len(out)
            ids[key] = tid
            out.append(Track(tid, tuple(i for i, _ in obs), tuple(k for _, k in obs),
                             np.array([feature_sets[i].positions[k] for i, k in obs]),
                             landmark_id=int(feature_sets[obs[0][0]].landmark_ids[obs[0][1]])))
        return out, ids


def run_incremental(camera, sequence, feature_sets: dict, matcher, nav_poses: dict, strip_of: dict = None,
                    settings: SolveSettings = None, references: dict = None, label="incremental") -> IncrementalRun:
    """Register images one by one against their predecessor and re-solve everything each time.

    ``matcher(a, b)`` returns the PairMatches of two consecutive images.
    ``references`` maps image ids to poses held fixed (carried-over images);
    they are added to the track list but never re-estimated. The first
    image of each strip is initialised from navigation without a
    registration check. An image sharing fewer than ``min_matches`` tracks
    with its predecessor raises RegistrationFailure, unless
    ``settings.weak_links == "nav"``: then it keeps its navigation pose as
    the initial value, its few matches are still used, and the link is
    listed in ``IncrementalRun.weak_links``.
    """
    settings = settings or SolveSettings()
    references = dict(references or {})
    strip_of = strip_of or {}
    tl = _TrackList()
    poses = {}
    points_by_key = {}
    records, step_times, weak = [], [], []
    prev = None
    for img in sequence:
        t0 = time.perf_counter()
        same_strip = prev is not None and strip_of.get(img, 0) == strip_of.get(prev, 0)
        if same_strip:
            m = matcher(prev, img)
            if len(m) < settings.min_matches and img not in references:
                msg = f"image {img} shares {len(m)} matches with image {prev}, need {settings.min_matches}"
                if settings.weak_links == "raise":
                    raise RegistrationFailure(msg)
                warnings.warn(msg, WeakRegistration)
                weak.append((img, len(m)))
            tl.extend(m)
        poses[img] = references.get(img, nav_poses[img])
        prev = img
        if all(i in references for i in poses):
            continue
        tracks, ids = tl.tracks(feature_sets)
        init_points = {ids[k]: x for k, x in points_by_key.items() if k in ids}
        problem, used = build_problem(camera, tracks, poses, nav_poses, references.keys(), settings, init_points)
        result = solve(problem, settings.lm)
        poses.update(result.poses)
        key_of = {tid: key for key, tid in ids.items()}
        points_by_key = {key_of[tid]: x for tid, x in result.points.items()}
        records.append(StepRecord(tuple(poses), tuple(sorted(references)), result, used, label))
        step_times.append(time.perf_counter() - t0)
    tracks, ids = tl.tracks(feature_sets)
    points = {ids[k]: x for k, x in points_by_key.items()}
    return IncrementalRun(poses, records, tracks, points, step_times, weak)


def partition_stream(image_ids, M, carryover):
    """Cluster member lists: M new images each, prefixed by the last ``carryover`` of the previous cluster."""
    ids = list(image_ids)
    out = []
    start = 0
    while start < len(ids):
        prefix = out[-1][-carryover:] if out and carryover else []
        out.append(list(prefix) + ids[start:start + M])
        start += M
    return out


def run_cluster_incremental(camera, sequence, feature_sets: dict, matcher, nav_poses: dict, M: int,
                            carryover: int = None, strip_of: dict = None, settings: SolveSettings = None):
    """Incremental solving restricted to sliding clusters.

    Each cluster starts an empty track list; its carried-over images keep
    the poses of the previous cluster and are fixed. Neighbouring strips are
    never linked.
    """
    if carryover is None:
        carryover = math.ceil(0.25 * M)
    if M < 3 or not 0 <= carryover < M:
        raise ConfigError(f"need M >= 3 and 0 <= carryover < M, got M={M}, carryover={carryover}")
    poses, records, step_times, weak = {}, [], [], []
    last_tracks, last_points = [], {}
    for k, members in enumerate(partition_stream(sequence, M, carryover)):
        refs = {i: poses[i] for i in members if i in poses}
        run = run_incremental(camera, members, feature_sets, matcher, nav_poses, strip_of, settings, refs,
                              label=f"cluster {k}")
        poses.update(run.poses)
        records.extend(run.records)
        step_times.extend(run.step_times)
        weak.extend(run.weak_links)
        last_tracks, last_points = run.tracks, run.points
    return IncrementalRun(poses, records, last_tracks, last_points, step_times, weak)
