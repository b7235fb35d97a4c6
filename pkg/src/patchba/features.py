"""Per-patch feature detection, patch-constrained matching and track building."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

DESCRIPTOR_RADIUS = 5  # 11x11 descriptor window
RATIO = 0.8
MAX_PER_PATCH = 50
SYNTH_DESCRIPTOR_DIM = 128


@dataclass(frozen=True)
class Feature:
    image_id: int
    patch_id: int
    position_px: tuple
    descriptor: np.ndarray
    score: float
    generation: int = 0


@dataclass
class FeatureSet:
    """Column-oriented features of one image."""

    image_id: int
    positions: np.ndarray
    descriptors: np.ndarray
    patch_ids: np.ndarray
    generations: np.ndarray
    scores: np.ndarray
    landmark_ids: np.ndarray = None

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 2)
        desc = np.asarray(self.descriptors, dtype=float)
        self.descriptors = desc.reshape(n, desc.shape[-1] if desc.ndim == 2 else -1)
        self.patch_ids = np.asarray(self.patch_ids, dtype=np.int64).reshape(n)
        self.generations = np.asarray(self.generations, dtype=np.int64).reshape(n)
        self.scores = np.asarray(self.scores, dtype=float).reshape(n)
        if self.landmark_ids is None:
            self.landmark_ids = np.full(n, -1, dtype=np.int64)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Feature:
        return Feature(self.image_id, int(self.patch_ids[i]), tuple(self.positions[i]),
                       self.descriptors[i], float(self.scores[i]), int(self.generations[i]))

    @classmethod
    def empty(cls, image_id, descriptor_dim=(2 * DESCRIPTOR_RADIUS + 1) ** 2):
        return cls(image_id, np.zeros((0, 2)), np.zeros((0, descriptor_dim)),
                   np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, image_id, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty(image_id)
        return cls(image_id,
                   np.concatenate([s.positions for s in sets]),
                   np.concatenate([s.descriptors for s in sets]),
                   np.concatenate([s.patch_ids for s in sets]),
                   np.concatenate([s.generations for s in sets]),
                   np.concatenate([s.scores for s in sets]),
                   np.concatenate([s.landmark_ids for s in sets]))

    def subset(self, idx):
        idx = np.asarray(idx)
        return FeatureSet(self.image_id, self.positions[idx], self.descriptors[idx],
                          self.patch_ids[idx], self.generations[idx], self.scores[idx],
                          self.landmark_ids[idx])

    def keys(self):
        return list(zip(self.patch_ids.tolist(), self.generations.tolist()))

    def groups(self):
        """Feature indices per patch key, keys ascending."""
        out = {}
        for i, k in enumerate(self.keys()):
            out.setdefault(k, []).append(i)
        return {k: np.array(v) for k, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def _gradients(img):
    return ndimage.sobel(img, axis=1, mode="nearest") / 8.0, ndimage.sobel(img, axis=0, mode="nearest") / 8.0


def _min_eigen_score(ix, iy, window=5):
    sxx = ndimage.uniform_filter(ix * ix, window)
    syy = ndimage.uniform_filter(iy * iy, window)
    sxy = ndimage.uniform_filter(ix * iy, window)
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.0, (0.5 * (sxx - syy)) ** 2 + sxy * sxy))
    return np.maximum(0.0, half_tr - disc)


def _refine_corner(ix, iy, r, c, radius=4, max_shift=2.0):
    """Point closest to every gradient line through the window (pixel-centre coordinates).

    The discrete score peak sits up to a pixel inside an L-shaped corner;
    the gradient lines of both edges cross at the true corner.
    """
    h, w = ix.shape
    r0, r1 = max(0, r - radius), min(h, r + radius + 1)
    c0, c1 = max(0, c - radius), min(w, c + radius + 1)
    gx, gy = ix[r0:r1, c0:c1].ravel(), iy[r0:r1, c0:c1].ravel()
    yy, xx = np.mgrid[r0:r1, c0:c1]
    px, py = xx.ravel() + 0.5, yy.ravel() + 0.5
    A = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
    b = np.array([gx * gx @ px + gx * gy @ py, gx * gy @ px + gy * gy @ py])
    if np.linalg.cond(A) > 1e6:
        return c + 0.5, r + 0.5
    x, y = np.linalg.solve(A, b)
    if abs(x - (c + 0.5)) > max_shift or abs(y - (r + 0.5)) > max_shift:
        return c + 0.5, r + 0.5
    return float(x), float(y)


def descriptor_at(image, row, col):
    r = DESCRIPTOR_RADIUS
    patch = image[row - r:row + r + 1, col - r:col + r + 1].astype(float).ravel()
    patch = patch - patch.mean()
    n = np.linalg.norm(patch)
    if n < 1e-9:
        return None
    return patch / n


def detect(image, window, image_id=0, patch_id=0, generation=0, max_features=MAX_PER_PATCH,
           quality=0.05, min_score=1e-3, min_distance=5) -> FeatureSet:
    """Minimum-eigenvalue corners inside ``window = (x0, y0, x1, y1)``.

    Pixel ``(row, col)`` has its centre at ``(col + 0.5, row + 0.5)``.
    """
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    x0, y0, x1, y1 = window
    margin = 8
    c0, r0 = max(0, int(np.floor(x0)) - margin), max(0, int(np.floor(y0)) - margin)
    c1, r1 = min(w, int(np.ceil(x1)) + margin), min(h, int(np.ceil(y1)) + margin)
    sub = img[r0:r1, c0:c1]
    if sub.size == 0 or np.ptp(sub) == 0:
        return FeatureSet.empty(image_id)
    ix, iy = _gradients(sub)
    score = _min_eigen_score(ix, iy)
    peak = score.max()
    thresh = max(min_score, quality * peak)
    rows, cols = np.nonzero(score > thresh)
    order = np.lexsort((cols, rows, -score[rows, cols]))
    taken = np.zeros(score.shape, dtype=bool)
    pos, desc, sc = [], [], []
    rad = DESCRIPTOR_RADIUS
    for k in order:
        r, c = rows[k], cols[k]
        R, C = r + r0, c + c0
        x, y = C + 0.5, R + 0.5
        if not (x0 <= x < x1 and y0 <= y < y1):
            continue
        if R < rad or C < rad or R >= h - rad or C >= w - rad:
            continue
        lo_r, lo_c = max(0, r - min_distance), max(0, c - min_distance)
        if taken[lo_r:r + min_distance + 1, lo_c:c + min_distance + 1].any():
            continue
        d = descriptor_at(img, R, C)
        if d is None:
            continue
        taken[r, c] = True
        fx, fy = _refine_corner(ix, iy, r, c)
        pos.append((fx + c0, fy + r0))
        desc.append(d)
        sc.append(score[r, c])
        if len(pos) >= max_features:
            break
    if not pos:
        return FeatureSet.empty(image_id)
    n = len(pos)
    return FeatureSet(image_id, np.array(pos), np.array(desc), np.full(n, patch_id),
                      np.full(n, generation), np.array(sc))


def patch_window(center, patch_size):
    half = patch_size / 2.0
    return (center[0] - half, center[1] - half, center[0] + half, center[1] + half)


def detect_in_patches(image, states, patch_size, image_id=0, max_per_patch=MAX_PER_PATCH):
    """Detect independently in every patch window; merge by ascending patch key.

    A pixel covered by two windows goes to the window with the smaller key.
    """
    sets = []
    seen = []
    for s in sorted(states, key=lambda s: s.key):
        fs = detect(image, patch_window(s.center_px, patch_size), image_id, s.patch_id,
                    s.generation, max_per_patch)
        if len(fs) and seen:
            keep = np.ones(len(fs), dtype=bool)
            for w in seen:
                keep &= ~_in_window(fs.positions, w)
            fs = fs.subset(np.nonzero(keep)[0])
        seen.append(patch_window(s.center_px, patch_size))
        sets.append(fs)
    return FeatureSet.concat(image_id, sets)


def _in_window(pos, w):
    return (pos[:, 0] >= w[0]) & (pos[:, 0] < w[2]) & (pos[:, 1] >= w[1]) & (pos[:, 1] < w[3])


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


@dataclass
class PairMatches:
    image_a: int
    image_b: int
    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray
    comparisons: int = 0

    def __len__(self):
        return len(self.idx_a)

    def pairs(self):
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))


def mutual_ratio_match(desc_a, desc_b, ratio=RATIO, max_distance=None):
    """Mutual nearest neighbours whose A->B ratio test passes.

    A lone candidate cannot fail the ratio test, so ``max_distance``
    optionally bounds the accepted descriptor distance as well.
    Returns ``(ia, ib, dist)``; ties resolve to the lowest index.
    """
    na, nb = len(desc_a), len(desc_b)
    if na == 0 or nb == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    d = cdist(desc_a, desc_b)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    rows = np.arange(na)
    d1 = d[rows, nn_ab]
    if nb >= 2:
        d2 = np.partition(d, 1, axis=1)[:, 1]
        ok = d1 < ratio * d2
    else:
        ok = np.ones(na, dtype=bool)
    ok &= nn_ba[nn_ab] == rows
    if max_distance is not None:
        ok &= d1 <= max_distance
    ia = rows[ok]
    return ia, nn_ab[ok], d1[ok]


def match_patchwise(fa: FeatureSet, fb: FeatureSet, correspondence=None, ratio=RATIO,
                    max_distance=None) -> PairMatches:
    """Match only within corresponding patches.

    ``correspondence`` maps a patch key of A to one of B; by default keys are
    paired with themselves.
    """
    ga, gb = fa.groups(), fb.groups()
    out_a, out_b, out_d = [], [], []
    comparisons = 0
    for key_a, ia in ga.items():
        key_b = key_a if correspondence is None else correspondence.get(key_a)
        ib = gb.get(key_b)
        if ib is None:
            continue
        comparisons += len(ia) * len(ib)
        ma, mb, md = mutual_ratio_match(fa.descriptors[ia], fb.descriptors[ib], ratio, max_distance)
        out_a.append(ia[ma])
        out_b.append(ib[mb])
        out_d.append(md)
    if out_a:
        idx_a, idx_b, dist = np.concatenate(out_a), np.concatenate(out_b), np.concatenate(out_d)
    else:
        idx_a, idx_b, dist = np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return PairMatches(fa.image_id, fb.image_id, idx_a.astype(int), idx_b.astype(int), dist, comparisons)


def match_brute_force(fa: FeatureSet, fb: FeatureSet, ratio=RATIO, max_distance=None) -> PairMatches:
    """Whole-image matching, the unconstrained baseline."""
    ia, ib, d = mutual_ratio_match(fa.descriptors, fb.descriptors, ratio, max_distance)
    return PairMatches(fa.image_id, fb.image_id, ia.astype(int), ib.astype(int), d, len(fa) * len(fb))


def shared_keys(fa: FeatureSet, fb: FeatureSet):
    return set(fa.keys()) & set(fb.keys())


# ---------------------------------------------------------------------------
# tracks
# ---------------------------------------------------------------------------


@dataclass
class Track:
    track_id: int
    image_ids: tuple
    feature_idx: tuple
    pixels: np.ndarray
    world_point: np.ndarray = None
    landmark_id: int = -1

    @property
    def observations(self):
        return [(i, self.pixels[k]) for k, i in enumerate(self.image_ids)]

    def __len__(self):
        return len(self.image_ids)


def build_tracks(feature_sets, matches, first_track_id=0):
    """Connected components of the match graph.

    Components holding two features of one image are dropped; surviving
    tracks are numbered by their smallest (image, feature) node.
    """
    if isinstance(feature_sets, dict):
        feature_sets = list(feature_sets.values())
    offsets, base = {}, 0
    for fs in sorted(feature_sets, key=lambda f: f.image_id):
        offsets[fs.image_id] = base
        base += len(fs)
    by_id = {fs.image_id: fs for fs in feature_sets}
    rows, cols = [], []
    for m in matches:
        if len(m) == 0:
            continue
        rows.append(offsets[m.image_a] + m.idx_a)
        cols.append(offsets[m.image_b] + m.idx_b)
    if not rows or base == 0:
        return []
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(base, base))
    _, labels = connected_components(graph, directed=False)
    used = np.zeros(base, dtype=bool)
    used[rows] = True
    used[cols] = True
    node_image = np.empty(base, dtype=np.int64)
    node_local = np.empty(base, dtype=np.int64)
    for iid, off in offsets.items():
        n = len(by_id[iid])
        node_image[off:off + n] = iid
        node_local[off:off + n] = np.arange(n)
    nodes = np.nonzero(used)[0]
    order = np.lexsort((nodes, labels[nodes]))
    nodes = nodes[order]
    lab = labels[nodes]
    splits = np.nonzero(np.diff(lab))[0] + 1
    comps = np.split(nodes, splits)
    comps.sort(key=lambda c: c[0])
    tracks = []
    for comp in comps:
        imgs = node_image[comp]
        if len(comp) < 2 or len(np.unique(imgs)) != len(imgs):
            continue
        order = np.argsort(imgs, kind="stable")
        comp, imgs = comp[order], imgs[order]
        local = node_local[comp]
        px = np.array([by_id[i].positions[k] for i, k in zip(imgs, local)])
        lm = by_id[int(imgs[0])].landmark_ids[local[0]]
        tracks.append(Track(first_track_id + len(tracks), tuple(int(i) for i in imgs),
                            tuple(int(k) for k in local), px, landmark_id=int(lm)))
    return tracks


# ---------------------------------------------------------------------------
# synthetic front-end
# ---------------------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


def hashed_uniform(ids, n, salt=0):
    """Deterministic uniforms in (0, 1), shape ``(len(ids), n)``."""
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1, 1)
    lanes = np.arange(n, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        x = _splitmix64(ids * np.uint64(0x100000001B3) + lanes * np.uint64(0x9E37) + np.uint64(salt))
        x = _splitmix64(x)
    return ((x >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def landmark_descriptors(landmark_ids, dim=SYNTH_DESCRIPTOR_DIM):
    """Unit-norm descriptors that depend only on the landmark id."""
    u1 = hashed_uniform(landmark_ids, dim, salt=1)
    u2 = hashed_uniform(landmark_ids, dim, salt=2)
    g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def synth_observations(landmark_ids, landmarks, camera, pose, states, patch_size, noise_px=0.0,
                       rng=None, image_id=0, max_per_patch=MAX_PER_PATCH, descriptor_dim=SYNTH_DESCRIPTOR_DIM) -> FeatureSet:
    """Stand-in for ``detect`` when the scene is known.

    Noise is drawn for every landmark inside the image in ascending id
    order, so it does not depend on which patch windows exist.
    """
    from .geometry import project_points

    landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if np.any(np.diff(landmark_ids) <= 0):
        order = np.argsort(landmark_ids, kind="stable")
        landmark_ids, landmarks = landmark_ids[order], landmarks[order]
    px, z = project_points(camera, pose, landmarks)
    with np.errstate(invalid="ignore"):
        vis = (z > 1e-6) & (px[:, 0] >= 0) & (px[:, 0] < camera.width_px) \
            & (px[:, 1] >= 0) & (px[:, 1] < camera.height_px)
    ids, obs = landmark_ids[vis], px[vis]
    if noise_px > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        obs = obs + noise_px * rng.standard_normal(obs.shape)
    free = np.ones(len(ids), dtype=bool)
    sets = []
    for s in sorted(states, key=lambda s: s.key):
        w = patch_window(s.center_px, patch_size)
        sel = np.nonzero(free & _in_window(obs, w))[0]
        if len(sel) == 0:
            continue
        free[sel] = False
        score = hashed_uniform(ids[sel], 1, salt=3)[:, 0]
        if len(sel) > max_per_patch:
            top = np.argsort(-score, kind="stable")[:max_per_patch]
            sel, score = sel[np.sort(top)], score[np.sort(top)]
        n = len(sel)
        sets.append(FeatureSet(image_id, obs[sel], landmark_descriptors(ids[sel], descriptor_dim),
                               np.full(n, s.patch_id), np.full(n, s.generation), score, ids[sel]))
    if not sets:
        fs = FeatureSet.empty(image_id, descriptor_dim)
        return fs
    return FeatureSet.concat(image_id, sets)
