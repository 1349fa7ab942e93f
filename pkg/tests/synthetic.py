"""Small rendered scenes shared by the odometry and harness tests."""

import numpy as np

from relocvo.geometry import SE3
from relocvo.harness.world import PathSpec, SequenceSpec, SyntheticWorld, WorldSpec
from relocvo.odometry import Frame, Keyframe, select_points

CAMERA = SequenceSpec().camera()
PATH = PathSpec()
# long wavelengths keep bilinear interpolation error far below 1e-3
SMOOTH = WorldSpec(relief=0.05, texture_amplitude=0.2, texture_wavelengths=(8.0, 16.0), texture_waves=6)


def world(seed=0, spec=None):
    return SyntheticWorld.create(seed, spec or WorldSpec())


def path_pose(s):
    return PATH.pose(s)


def frame_at(w, pose, fid, levels=3):
    pyr, depth = w.render(CAMERA, pose, levels)
    return Frame(fid, 0.1 * fid, pyr), depth


def keyframe_at(w, pose, fid, fixed=False, block=6, reloc=None):
    """Keyframe at ``pose`` with ground-truth inverse depths."""
    frame, depth = frame_at(w, pose, fid)
    uv = select_points(frame.pyramid[0], block)
    idepth = 1.0 / depth[uv[:, 1].astype(int), uv[:, 0].astype(int)]
    return Keyframe(frame, pose, CAMERA, uv, idepth, fixed_depth=fixed, reloc=reloc)


def perturb(pose, rng, sigma_t=0.05):
    """``pose`` with its translation disturbed by isotropic noise."""
    return SE3(pose.R, pose.t + rng.normal(scale=sigma_t, size=3))


def relative_translation_error(poses, truth):
    """Largest translation error of poses relative to the first id."""
    ids = sorted(poses)
    a = ids[0]
    err = 0.0
    for b in ids[1:]:
        rel = poses[a] @ poses[b].inverse()
        ref = truth[a] @ truth[b].inverse()
        err = max(err, float(np.linalg.norm((ref.inverse() @ rel).t)))
    return err


def photometric_case(w, rng):
    """Random host/target pair a short hop apart on the path, plus one visible point."""
    s = rng.uniform(0.0, 2.0)
    host = keyframe_at(w, perturb(path_pose(s), rng, 0.01), 0)
    target = keyframe_at(w, perturb(path_pose(s + rng.uniform(0.05, 0.3)), rng, 0.01), 1)
    return host, target, host.point(int(rng.integers(len(host))))


def photometric_fd_error(host, target, point, eps=1e-6):
    """Largest relative deviation of the analytic photometric Jacobians from central differences."""
    from relocvo.odometry import photometric_residual

    r0, J_h, J_t, J_d = photometric_residual(point, host, target)
    num_h, num_t = np.zeros_like(J_h), np.zeros_like(J_t)
    h_pose, t_pose = host.pose, target.pose
    for k in range(6):
        e = np.zeros(6)
        e[k] = eps
        host.pose = h_pose.retract(e)
        rp = photometric_residual(point, host, target)[0]
        host.pose = h_pose.retract(-e)
        rm = photometric_residual(point, host, target)[0]
        host.pose = h_pose
        num_h[:, k] = (rp - rm) / (2 * eps)
        rp = photometric_residual(point, host, target, t_pose.retract(e))[0]
        rm = photometric_residual(point, host, target, t_pose.retract(-e))[0]
        num_t[:, k] = (rp - rm) / (2 * eps)
    d = point.idepth
    point.idepth = d + eps
    rp = photometric_residual(point, host, target)[0]
    point.idepth = d - eps
    rm = photometric_residual(point, host, target)[0]
    point.idepth = d
    num_d = (rp - rm) / (2 * eps)
    analytic = np.concatenate([J_h.ravel(), J_t.ravel(), np.ravel(J_d)])
    numeric = np.concatenate([num_h.ravel(), num_t.ravel(), num_d.ravel()])
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
