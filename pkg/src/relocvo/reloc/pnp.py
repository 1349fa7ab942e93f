"""Minimal P3P solver, RANSAC wrapper and Gauss-Newton reprojection refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import RelocalizationFailed
from ..geometry import SE3, project_points, reprojection_residual_jacobian

MIN_INLIERS = 12
THRESHOLD_PX = 2.0
MAX_ITERATIONS = 300


def kabsch(X, P):
    """Rigid ``(R, t)`` minimising ``sum |R X + t - P|^2``."""
    xm, pm = X.mean(axis=0), P.mean(axis=0)
    H = (X - xm).T @ (P - pm)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, pm - R @ xm


def p3p(bearings, X):
    """Grunert's solution: up to four poses mapping world points ``X`` onto unit ``bearings``."""
    f = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    a2 = float(np.sum((X[1] - X[2]) ** 2))
    b2 = float(np.sum((X[0] - X[2]) ** 2))
    c2 = float(np.sum((X[0] - X[1]) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    ca, cb, cg = float(f[1] @ f[2]), float(f[0] @ f[2]), float(f[0] @ f[1])
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    A4 = (p - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (p * p - 1 + 2 * p * p * cb * cb + 2 * (b2 - c2) / b2 * ca * ca - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    A1 = 4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - q) * ca * cg)
    A0 = (1 + p) ** 2 - 4 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.abs(coeffs).max() == 0:
        return []
    poses = []
    for root in np.roots(coeffs):
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = root.real
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((p - 1) * v * v - 2 * p * cb * v + 1 + p) / den
        if u <= 0:
            continue
        den1 = 1 + v * v - 2 * v * cb
        if den1 <= 0:
            continue
        s1 = math.sqrt(b2 / den1)
        s = _polish_depths(np.array([s1, u * s1, v * s1]), a2, b2, c2, ca, cb, cg)
        P = s[:, None] * f
        R, t = kabsch(X, P)
        poses.append(SE3(R, t))
    return poses


def _polish_depths(s, a2, b2, c2, ca, cb, cg, steps=3):
    """Newton on the three law-of-cosines equations; recovers accuracy lost near double roots."""
    for _ in range(steps):
        s1, s2, s3 = s
        F = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
        ])
        J = 2 * np.array([
            [0.0, s2 - s3 * ca, s3 - s2 * ca],
            [s1 - s3 * cb, 0.0, s3 - s1 * cb],
            [s1 - s2 * cg, s2 - s1 * cg, 0.0],
        ])
        try:
            s = s - np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
    return s


def reprojection_errors(pose, X, uv, K):
    """Per-point pixel error; points behind the camera get ``inf``."""
    proj, valid = project_points(K, pose.act(X))
    err = np.linalg.norm(proj - uv, axis=1)
    return np.where(valid, err, np.inf)


def refine_pose(pose, X, uv, K, max_iterations=20, tolerance=1e-12):
    """Gauss-Newton on reprojection residuals.

    Returns ``(pose, mean error, refined)``. If the mean error would increase
    the input pose is returned with ``refined=False``.
    """
    X = np.asarray(X, dtype=float)
    uv = np.asarray(uv, dtype=float)
    if len(X) < 4:
        raise RelocalizationFailed("pose refinement needs at least 4 correspondences")
    start_err = float(np.mean(reprojection_errors(pose, X, uv, K)))
    cur = pose
    r, J = reprojection_residual_jacobian(K, cur, X, uv)
    cost = float(np.sum(r * r))
    for _ in range(max_iterations):
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf
        g = Jf.T @ r.ravel()
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _h in range(8):
            trial = cur.retract(step)
            r_t, J_t = reprojection_residual_jacobian(K, trial, X, uv)
            if np.all(trial.act(X)[:, 2] > 0):
                cost_t = float(np.sum(r_t * r_t))
                if cost_t <= cost:
                    accepted = True
                    break
            step = 0.5 * step
        if not accepted:
            break
        gain = cost - cost_t
        cur, r, J, cost = trial, r_t, J_t, cost_t
        if np.linalg.norm(step) < tolerance or gain <= 1e-12 * cost:
            break
    err = float(np.mean(reprojection_errors(cur, X, uv, K)))
    if not err <= start_err:
        return pose, start_err, False
    return cur, err, True


@dataclass
class PnPResult:
    pose: SE3
    inliers: np.ndarray  # bool mask
    mean_error: float
    iterations: int

    @property
    def n_inliers(self):
        return int(self.inliers.sum())


def pnp_ransac(X, uv, K, iterations=MAX_ITERATIONS, threshold=THRESHOLD_PX, min_inliers=MIN_INLIERS,
               seed=0, confidence=0.999, rng=None):
    """P3P hypotheses in RANSAC, then refinement on the best consensus set.

    Sampling stops early once the standard ``confidence`` bound on the
    current best inlier ratio is met, and never exceeds ``iterations``.
    """
    X = np.asarray(X, dtype=float)
    uv = np.asarray(uv, dtype=float)
    n = len(X)
    if n < 4:
        raise RelocalizationFailed(f"PnP needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(seed) if rng is None else rng
    f = K.bearings(uv)
    best_count, best_cost, best_pose = -1, np.inf, None
    needed = iterations
    it = 0
    while it < min(needed, iterations):
        it += 1
        sample = rng.choice(n, 3, replace=False)
        for pose in p3p(f[sample], X[sample]):
            err = reprojection_errors(pose, X, uv, K)
            inl = err < threshold
            count = int(inl.sum())
            cost = float(np.sum(np.minimum(err, threshold)))
            if count > best_count or (count == best_count and cost < best_cost):
                best_count, best_cost, best_pose = count, cost, pose
        if best_count > 0:
            w = best_count / n
            if w >= 1.0:
                needed = 0
            else:
                denom = math.log(max(1.0 - w**3, 1e-300))
                needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else iterations
    if best_pose is None or best_count < 4:
        raise RelocalizationFailed("no PnP hypothesis reached 4 inliers")
    pose = best_pose
    inl = reprojection_errors(pose, X, uv, K) < threshold
    for _ in range(3):
        pose, _, _ = refine_pose(pose, X[inl], uv[inl], K)
        new = reprojection_errors(pose, X, uv, K) < threshold
        if np.array_equal(new, inl) or new.sum() < 4:
            break
        inl = new
    inl = reprojection_errors(pose, X, uv, K) < threshold
    if inl.sum() < min_inliers:
        raise RelocalizationFailed(f"only {int(inl.sum())} PnP inliers, need {min_inliers}")
    mean_err = float(np.mean(reprojection_errors(pose, X[inl], uv[inl], K)))
    return PnPResult(pose, inl, mean_err, it)
