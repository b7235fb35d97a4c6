"""Levenberg-Marquardt bundle adjustment with a Schur complement on the points."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..errors import NumericalFailure
from ..geometry import Pose, quat_conjugate, quat_multiply, quat_normalize, quat_to_matrix, rotation_exp, skew
from .problem import BAProblem, jacobians_batch, project_batch, robust_loss

log = logging.getLogger(__name__)


@dataclass
class LMOptions:
    max_iterations: int = 100
    gradient_tol: float = 1e-8
    cost_rel_tol: float = 1e-10
    step_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e16
    outlier_threshold_px: float = None  # default: 3x the Huber threshold


@dataclass
class BAResult:
    poses: dict
    points: dict
    initial_cost: float
    final_cost: float
    iterations: int
    residuals: np.ndarray
    residual_norms: np.ndarray
    inliers: np.ndarray
    converged: bool
    wall_time_s: float
    obs_image: np.ndarray
    obs_track: np.ndarray
    fixed: frozenset = frozenset()
    cost_history: list = field(default_factory=list)
    termination: str = ""

    def inlier_counts(self) -> dict:
        ids, counts = np.unique(self.obs_image[self.inliers], return_counts=True)
        out = {i: 0 for i in self.poses}
        out.update({int(i): int(c) for i, c in zip(ids, counts)})
        return out

    def stats(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "termination": self.termination,
            "wall_time_s": self.wall_time_s,
            "n_observations": int(len(self.residual_norms)),
            "n_inliers": int(self.inliers.sum()),
            "n_poses": len(self.poses),
            "n_points": len(self.points),
        }


class _State:
    """Flat parameter arrays of one problem."""

    def __init__(self, problem: BAProblem):
        self.problem = problem
        self.cam_ids = sorted(problem.poses)
        cam_index = {c: k for k, c in enumerate(self.cam_ids)}
        self.free = np.array([c not in problem.fixed for c in self.cam_ids])
        self.free_index = np.full(len(self.cam_ids), -1)
        self.free_index[self.free] = np.arange(int(self.free.sum()))
        self.n_free = int(self.free.sum())
        self.pt_ids = sorted(problem.points)
        pt_index = {p: k for k, p in enumerate(self.pt_ids)}
        self.obs_cam = np.array([cam_index[int(i)] for i in problem.obs_image], dtype=np.int64)
        self.obs_pt = np.array([pt_index[int(t)] for t in problem.obs_track], dtype=np.int64)
        self.quats = np.array([problem.poses[c].rotation for c in self.cam_ids]).reshape(-1, 4)
        self.centers = np.array([problem.poses[c].translation for c in self.cam_ids]).reshape(-1, 3)
        self.X = np.array([problem.points[p] for p in self.pt_ids], dtype=float).reshape(-1, 3)
        priors = [(cam_index[c], p) for c, p in sorted(problem.priors.items())
                  if c in cam_index and c not in problem.fixed]
        self.prior_cam = np.array([k for k, _ in priors], dtype=np.int64)
        self.prior_free = self.free_index[self.prior_cam]
        self.prior_q_inv = quat_conjugate(np.array([p.pose.rotation for _, p in priors]).reshape(-1, 4))
        self.prior_t = np.array([p.pose.translation for _, p in priors]).reshape(-1, 3)
        self.prior_w_pos = np.array([1.0 / p.sigma_pos_m for _, p in priors])
        # a zero attitude sigma means a position-only prior
        self.prior_w_att = np.array([1.0 / p.sigma_att_rad if p.sigma_att_rad else 0.0 for _, p in priors])

    def copy_params(self):
        return self.quats.copy(), self.centers.copy(), self.X.copy()


def _evaluate(state: _State, quats, centers, X, active):
    pr = state.problem
    R_cam = quat_to_matrix(quats)
    R = R_cam[state.obs_cam]
    xc, px, valid = project_batch(pr.camera, R, centers[state.obs_cam], X[state.obs_pt])
    r = pr.obs_px - px
    s = np.einsum("ni,ni->n", r, r)
    rho, w = robust_loss(s, pr.robust_delta_px)
    use = active & valid
    cost = float(rho[use].sum())
    k = state.prior_cam
    phi = _log_batch(quat_multiply(state.prior_q_inv, quats[k]))
    rp = np.concatenate([(centers[k] - state.prior_t) * state.prior_w_pos[:, None],
                         phi * state.prior_w_att[:, None]], axis=1)
    cost += float(np.sum(rp * rp))
    return dict(R=R, xc=xc, r=r, s=s, w=w, valid=valid, cost=cost, prior_r=rp, prior_phi=phi)


def _log_batch(q):
    """Axis-angle vectors of a stack of unit quaternions."""
    q = np.where(q[:, :1] < 0, -q, q)
    w, v = q[:, 0], q[:, 1:]
    s = np.linalg.norm(v, axis=1)
    small = s < 1e-12
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), 2.0 * np.arctan2(s, w) / np.where(small, 1.0, s))
    return v * scale[:, None]


def _right_jacobian_inv_batch(phi):
    theta = np.linalg.norm(phi, axis=1)
    W = skew(phi)
    small = theta < 1e-6
    t = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0, 1.0 / t ** 2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)))
    return np.eye(3)[None] + 0.5 * W + c[:, None, None] * (W @ W)


def _accumulate(index, values, n):
    """Sum rows of ``values`` (m, ...) into ``n`` bins."""
    shape = values.shape[1:]
    flat = values.reshape(len(values), int(np.prod(shape)))
    out = np.empty((n, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(index, weights=flat[:, k], minlength=n)
    return out.reshape((n,) + shape)


def _pairs_by_point(pt):
    """All ordered (o, o') observation pairs sharing a point."""
    order = np.argsort(pt, kind="stable")
    sp = pt[order]
    starts = np.r_[0, np.nonzero(np.diff(sp))[0] + 1]
    lengths = np.diff(np.r_[starts, len(sp)])
    group_len = np.repeat(lengths, lengths)
    group_start = np.repeat(starts, lengths)
    first = np.repeat(order, group_len)
    offs = np.arange(group_len.sum()) - np.repeat(np.cumsum(group_len) - group_len, group_len)
    second = order[np.repeat(group_start, group_len) + offs]
    return first, second


class _Linearization:
    def __init__(self, state: _State, ev, active):
        n_pt = len(state.pt_ids)
        C = state.n_free
        use = active & ev["valid"]
        Jc, Jp = jacobians_batch(state.problem.camera, ev["R"], ev["xc"])
        w = np.where(use, ev["w"], 0.0)
        r = ev["r"]
        wJpT = np.transpose(Jp * w[:, None, None], (0, 2, 1))
        self.Hpp = _accumulate(state.obs_pt, wJpT @ Jp, n_pt)
        self.gp = _accumulate(state.obs_pt, (wJpT @ r[:, :, None])[:, :, 0], n_pt)
        fc = state.free_index[state.obs_cam]
        sel = np.nonzero((fc >= 0) & use)[0]
        self.sel = sel
        self.fc = fc[sel]
        self.pt = state.obs_pt[sel]
        Jc_s = Jc[sel]
        wJcT = np.transpose(Jc_s * w[sel, None, None], (0, 2, 1))
        self.Hcc = _accumulate(self.fc, wJcT @ Jc_s, C) if C else np.zeros((0, 6, 6))
        self.gc = _accumulate(self.fc, (wJcT @ r[sel][:, :, None])[:, :, 0], C) if C else np.zeros((0, 6))
        self.W = wJcT @ Jp[sel]
        if len(state.prior_cam):
            n_pr = len(state.prior_cam)
            Jpr = np.zeros((n_pr, 6, 6))
            Jpr[:, 0:3, 3:6] = np.eye(3)[None] * state.prior_w_pos[:, None, None]
            Jpr[:, 3:6, 0:3] = _right_jacobian_inv_batch(ev["prior_phi"]) * state.prior_w_att[:, None, None]
            JprT = np.transpose(Jpr, (0, 2, 1))
            np.add.at(self.Hcc, state.prior_free, JprT @ Jpr)
            np.add.at(self.gc, state.prior_free, (JprT @ ev["prior_r"][:, :, None])[:, :, 0])
        self.has_obs = np.bincount(state.obs_pt[use], minlength=n_pt) > 0
        self.pairs = _pairs_by_point(self.pt) if len(sel) else (np.zeros(0, int), np.zeros(0, int))
        self.C = C

    def gradient_inf_norm(self):
        g = np.concatenate([self.gc.ravel(), self.gp.ravel()])
        return float(np.abs(g).max()) if g.size else 0.0

    def solve(self, lam):
        C = self.C
        diag_floor = 1e-12
        Hpp = self.Hpp.copy()
        idx = np.arange(3)
        Hpp[:, idx, idx] += lam * np.maximum(Hpp[:, idx, idx], diag_floor)
        Hpp_inv = np.zeros_like(Hpp)
        ok = self.has_obs
        Hpp_inv[ok] = np.linalg.inv(Hpp[ok])
        if C == 0:
            dp = -(Hpp_inv @ self.gp[:, :, None])[:, :, 0]
            return np.zeros((0, 6)), dp
        Hcc = self.Hcc.copy()
        idx6 = np.arange(6)
        Hcc[:, idx6, idx6] += lam * np.maximum(Hcc[:, idx6, idx6], diag_floor)
        n = 6 * C
        S = np.zeros((n, n))
        for k in range(C):
            S[6 * k:6 * k + 6, 6 * k:6 * k + 6] = Hcc[k]
        Y = self.W @ Hpp_inv[self.pt]
        a, b = self.pairs
        if len(a):
            blocks = Y[a] @ np.transpose(self.W[b], (0, 2, 1))
            rows = 6 * self.fc[a][:, None, None] + idx6[None, :, None]
            cols = 6 * self.fc[b][:, None, None] + idx6[None, None, :]
            flat = (rows * n + cols).ravel()
            S -= np.bincount(flat, weights=blocks.ravel(), minlength=n * n).reshape(n, n)
        rhs = -self.gc.copy()
        if len(self.sel):
            rhs += _accumulate(self.fc, (Y @ self.gp[self.pt][:, :, None])[:, :, 0], C)
        S = 0.5 * (S + S.T)
        try:
            dc = linalg.cho_solve(linalg.cho_factor(S, check_finite=False), rhs.ravel(), check_finite=False)
        except (linalg.LinAlgError, ValueError):
            return None
        dc = dc.reshape(C, 6)
        back = self.gp.copy()
        if len(self.sel):
            WT = np.transpose(self.W, (0, 2, 1))
            back += _accumulate(self.pt, (WT @ dc[self.fc][:, :, None])[:, :, 0], len(self.gp))
        dp = -(Hpp_inv @ back[:, :, None])[:, :, 0]
        return dc, dp


def _apply(state: _State, dc, dp):
    quats, centers, X = state.copy_params()
    if state.n_free:
        f = state.free
        quats[f] = quat_normalize(quat_multiply(quats[f], rotation_exp(dc[:, :3])))
        centers[f] = centers[f] + dc[:, 3:]
    X = X + dp
    return quats, centers, X


def solve(problem: BAProblem, options: LMOptions = None) -> BAResult:
    """Minimise the robust reprojection cost (plus pose priors).

    Accepted steps strictly decrease the cost. A step that would push a
    currently valid observation behind its camera is rejected like a cost
    increase; observations invalid from the start stay inactive and are
    reported as outliers.
    """
    opt = options or LMOptions()
    t0 = time.perf_counter()
    state = _State(problem)
    ev = _evaluate(state, state.quats, state.centers, state.X, np.ones(problem.n_observations, bool))
    active = ev["valid"].copy()
    if not np.isfinite(ev["cost"]):
        raise NumericalFailure("initial cost is not finite")
    initial_cost = ev["cost"]
    cost = initial_cost
    history = [cost]
    lam = opt.lambda_init
    iterations = 0
    converged = False
    termination = "max_iterations"
    lin = _Linearization(state, ev, active)
    while iterations < opt.max_iterations:
        if lin.gradient_inf_norm() < opt.gradient_tol:
            converged, termination = True, "gradient"
            break
        iterations += 1
        step = lin.solve(lam)
        if step is None:
            lam *= opt.lambda_factor
            if lam > opt.lambda_max:
                termination = "lambda"
                break
            continue
        dc, dp = step
        step_norm = float(np.sqrt(np.sum(dc * dc) + np.sum(dp * dp)))
        x_norm = float(np.sqrt(np.sum(state.centers ** 2) + np.sum(state.X ** 2)))
        if step_norm < opt.step_tol * (x_norm + opt.step_tol):
            converged, termination = True, "step"
            break
        quats, centers, X = _apply(state, dc, dp)
        ev_new = _evaluate(state, quats, centers, X, active)
        new_cost = ev_new["cost"]
        if not np.isfinite(new_cost):
            raise NumericalFailure("cost became non-finite")
        lost_valid = bool(np.any(active & ~ev_new["valid"]))
        if new_cost < cost and not lost_valid:
            rel = (cost - new_cost) / max(cost, 1e-300)
            state.quats, state.centers, state.X = quats, centers, X
            cost = new_cost
            history.append(cost)
            ev = ev_new
            lam = max(lam / opt.lambda_factor, 1e-15)
            lin = _Linearization(state, ev, active)
            if rel < opt.cost_rel_tol:
                converged, termination = True, "cost"
                break
        else:
            lam *= opt.lambda_factor
            if lam > opt.lambda_max:
                converged, termination = True, "lambda"
                break
    poses = {}
    for k, c in enumerate(state.cam_ids):
        poses[c] = problem.poses[c] if not state.free[k] else Pose(state.quats[k], state.centers[k])
    points = {p: state.X[k].copy() for k, p in enumerate(state.pt_ids)}
    norms = np.sqrt(ev["s"])
    thr = opt.outlier_threshold_px or 3.0 * problem.robust_delta_px
    inliers = active & ev["valid"] & (norms <= thr)
    return BAResult(poses, points, initial_cost, cost, iterations, ev["r"], norms, inliers, converged,
                    time.perf_counter() - t0, problem.obs_image.copy(), problem.obs_track.copy(),
                    problem.fixed, history, termination)
