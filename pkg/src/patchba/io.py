"""Plain-text readers and writers: CSV, JSON, ASCII PLY, binary PGM and ASCII-grid DSMs.

Floats are written with ``repr`` so that a write/read round trip is exact
and identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .geometry import CameraModel, GeoAnchor, Pose
from .terrain import DEFAULT_NODATA, DsmRaster

MISSION_FILES = ("mission.json", "truth_poses.csv", "nav_poses.csv", "landmarks.csv", "dsm.asc")
POSE_COLUMNS = ("image_id", "x", "y", "z", "qw", "qx", "qy", "qz", "fixed")
MISSION_POSE_COLUMNS = ("image_id", "strip_id", "timestamp", "x", "y", "z", "qw", "qx", "qy", "qz")


def _f(v) -> str:
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# poses and landmarks
# ---------------------------------------------------------------------------


def _pose_values(p: Pose):
    return [_f(v) for v in p.translation] + [_f(v) for v in p.rotation]


def _pose_from_row(row) -> Pose:
    t = [float(row[k]) for k in ("x", "y", "z")]
    q = [float(row[k]) for k in ("qw", "qx", "qy", "qz")]
    return Pose(q, t)


def write_poses_csv(path, poses: dict, fixed=()):
    fixed = set(fixed)
    rows = [[i] + _pose_values(poses[i]) + [int(i in fixed)] for i in sorted(poses)]
    _write_rows(path, POSE_COLUMNS, rows)


def read_poses_csv(path):
    """``(poses, fixed_ids)``; the ``fixed`` column is optional."""
    poses, fixed = {}, set()
    for row in _read_rows(path):
        i = int(row["image_id"])
        poses[i] = _pose_from_row(row)
        if int(row.get("fixed") or 0):
            fixed.add(i)
    return poses, fixed


def write_mission_poses_csv(path, image_ids, poses: dict, strip_ids: dict, timestamps: dict):
    rows = [[i, strip_ids[i], _f(timestamps[i])] + _pose_values(poses[i]) for i in image_ids]
    _write_rows(path, MISSION_POSE_COLUMNS, rows)


def read_mission_poses_csv(path):
    """``(image_ids, poses, strip_ids, timestamps)`` in file order."""
    ids, poses, strips, times = [], {}, {}, {}
    for row in _read_rows(path):
        i = int(row["image_id"])
        ids.append(i)
        poses[i] = _pose_from_row(row)
        strips[i] = int(row.get("strip_id") or 0)
        times[i] = float(row.get("timestamp") or 0.0)
    return ids, poses, strips, times


def write_landmarks_csv(path, ids, points):
    rows = [[int(i)] + [_f(v) for v in p] for i, p in zip(ids, np.asarray(points).reshape(-1, 3))]
    _write_rows(path, ("landmark_id", "x", "y", "z"), rows)


def read_landmarks_csv(path):
    rows = _read_rows(path)
    ids = np.array([int(r["landmark_id"]) for r in rows], dtype=np.int64)
    pts = np.array([[float(r[k]) for k in "xyz"] for r in rows], dtype=float).reshape(-1, 3)
    return ids, pts


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------


def write_dsm_asc(path, dsm: DsmRaster):
    """ESRI ASCII grid; rows are written north first."""
    lines = [f"ncols {dsm.n_cols}", f"nrows {dsm.n_rows}", f"xllcorner {_f(dsm.origin[0])}",
             f"yllcorner {_f(dsm.origin[1])}", f"cellsize {_f(dsm.cell_size)}", f"nodata_value {_f(dsm.nodata)}"]
    for row in dsm.elevations[::-1]:
        lines.append(" ".join(_f(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dsm_asc(path) -> DsmRaster:
    tokens = Path(path).read_text().split()
    header = {}
    k = 0
    while k < len(tokens) and not _is_number(tokens[k]):
        header[tokens[k].lower()] = tokens[k + 1]
        k += 2
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ValueError(f"{path}: DSM header lacks {key}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if "xllcorner" in header:
        x0, y0 = float(header["xllcorner"]), float(header["yllcorner"])
    else:
        half = 0.5 * float(header["cellsize"])
        x0, y0 = float(header["xllcenter"]) - half, float(header["yllcenter"]) - half
    values = np.array(tokens[k:], dtype=float)
    if values.size != ncols * nrows:
        raise ValueError(f"{path}: expected {ncols * nrows} elevations, found {values.size}")
    z = values.reshape(nrows, ncols)[::-1]
    nodata = float(header.get("nodata_value", DEFAULT_NODATA))
    return DsmRaster((x0, y0), float(header["cellsize"]), z, nodata)


def _is_number(token) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def write_pgm(path, image):
    """8-bit binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are single channel")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < n:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[pos:pos + n], dtype=dtype).reshape(h, w).astype(float)


# ---------------------------------------------------------------------------
# mission directories
# ---------------------------------------------------------------------------


def save_mission(directory, mission):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "mission.json", mission.config_dict())
    write_mission_poses_csv(d / "truth_poses.csv", mission.image_ids, mission.truth_poses, mission.strip_ids,
                            mission.timestamps)
    write_mission_poses_csv(d / "nav_poses.csv", mission.image_ids, mission.nav_poses, mission.strip_ids,
                            mission.timestamps)
    write_landmarks_csv(d / "landmarks.csv", mission.landmark_ids, mission.landmarks)
    write_dsm_asc(d / "dsm.asc", mission.dsm)
    return d


def load_mission(directory):
    from .mission_sim import FlightPlan, Mission, NoiseSpec, TerrainSpec

    d = Path(directory)
    for name in MISSION_FILES:
        if not (d / name).is_file():
            raise FileNotFoundError(f"mission file missing: {d / name}")
    cfg = read_json(d / "mission.json")
    terrain = dict(cfg["terrain"])
    terrain["slope"] = tuple(terrain.get("slope", (0.0, 0.0)))
    ids, truth, strips, times = read_mission_poses_csv(d / "truth_poses.csv")
    nav_ids, nav, _, _ = read_mission_poses_csv(d / "nav_poses.csv")
    if nav_ids != ids:
        raise ValueError("truth and nav pose files list different images")
    lm_ids, lm = read_landmarks_csv(d / "landmarks.csv")
    return Mission(CameraModel.from_dict(cfg["camera"]), GeoAnchor(**cfg["anchor"]), read_dsm_asc(d / "dsm.asc"),
                   FlightPlan(**cfg["plan"]), TerrainSpec(**terrain), NoiseSpec(**cfg["noise"]), int(cfg["seed"]),
                   ids, strips, times, truth, nav, lm_ids, lm, float(cfg.get("landmark_density_per_m2", 0.3)))


# ---------------------------------------------------------------------------
# run products
# ---------------------------------------------------------------------------


def write_points_ply(path, points):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property double x", "property double y",
             "property double z", "end_header"]
    lines += [" ".join(_f(v) for v in p) for p in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, k = 0, 1
    while lines[k].strip() != "end_header":
        parts = lines[k].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        k += 1
    body = lines[k + 1:k + 1 + n]
    return np.array([[float(v) for v in ln.split()[:3]] for ln in body], dtype=float).reshape(-1, 3)


def write_residuals_csv(path, records):
    """One row per observation of every record: residual vector, norm and inlier flag."""
    rows = []
    for rec in records:
        r = rec.result
        for k in range(len(r.obs_image)):
            rows.append([rec.label, int(r.obs_image[k]), int(r.obs_track[k]), _f(r.residuals[k, 0]),
                         _f(r.residuals[k, 1]), _f(r.residual_norms[k]), int(r.inliers[k])])
    _write_rows(path, ("solve", "image_id", "track_id", "du", "dv", "norm", "inlier"), rows)


def write_matches_csv(path, matches: dict, feature_sets: dict):
    rows = []
    for key in sorted(matches):
        m = matches[key]
        if m is None:
            continue
        fa, fb = feature_sets[m.image_a], feature_sets[m.image_b]
        for ia, ib, dist in zip(m.idx_a.tolist(), m.idx_b.tolist(), m.distance.tolist()):
            xa, ya = fa.positions[ia]
            xb, yb = fb.positions[ib]
            rows.append([m.image_a, m.image_b, int(fa.patch_ids[ia]), _f(xa), _f(ya), _f(xb), _f(yb), _f(dist)])
    _write_rows(path, ("image_a", "image_b", "patch_id", "xa", "ya", "xb", "yb", "distance"), rows)


def write_tracks_csv(path, tracks):
    rows = []
    for t in tracks:
        for i, (x, y) in zip(t.image_ids, t.pixels):
            rows.append([t.track_id, i, _f(x), _f(y)])
    _write_rows(path, ("track_id", "image_id", "x", "y"), rows)


def write_footprints_csv(path, footprints: dict):
    header = ["image_id"] + [f"{c}{k}" for k in range(4) for c in "xy"] + ["cx", "cy", "heading_deg"]
    rows = []
    for i in sorted(footprints):
        fp = footprints[i]
        rows.append([i] + [_f(v) for v in fp.corners.reshape(-1)] + [_f(fp.center[0]), _f(fp.center[1]),
                                                                     _f(math.degrees(fp.heading_rad))])
    _write_rows(path, header, rows)


def write_patch_trajectory_csv(path, states_by_image: dict, order=None):
    rows = []
    for i in order if order is not None else sorted(states_by_image):
        for s in states_by_image[i]:
            rows.append([i, s.patch_id, _f(s.center_px[0]), _f(s.center_px[1]), s.generation])
    _write_rows(path, ("image_id", "patch_id", "cx", "cy", "generation"), rows)


def write_solve_stats_json(path, records):
    write_json(path, [dict(label=r.label, images=list(r.image_ids), fixed=list(r.fixed_ids), **r.result.stats())
                      for r in records])


def write_metrics_json(path, report):
    write_json(path, report.to_dict())


def read_metrics_json(path):
    from .mission_sim import MetricsReport

    d = read_json(path)
    d.pop("std_convention", None)
    return MetricsReport(**d)


def write_table_csv(path, reports: dict):
    """Comparison table: one row per metric, one column per run."""
    from .mission_sim import TABLE_FIELDS

    names = list(reports)
    rows = [[label] + [_f(getattr(reports[n], key)) for n in names] for key, label in TABLE_FIELDS]
    _write_rows(path, ["metric"] + names, rows)
