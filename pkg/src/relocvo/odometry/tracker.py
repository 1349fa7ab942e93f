"""Coarse-to-fine direct alignment of a frame against the newest keyframe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, TrackingLostError
from ..geometry import relpose_residual_jacobian
from .photometric import HUBER, huber_energy, huber_weights, warp_residuals


@dataclass
class TrackerConfig:
    iterations: int = 10
    w: float = 1e3
    huber: float = HUBER
    lost_threshold: float = 0.1  # RMS intensity residual at the finest level
    min_valid: float = 0.3  # fraction of pattern pixels that must stay in view
    step_tolerance: float = 1e-6
    max_halvings: int = 8
    min_decrease: float = 1e-3  # stop a level once the relative energy decrease falls below this


@dataclass
class TrackResult:
    pose: object
    energy: float  # finest-level photometric + prior energy
    rms: float
    iterations: int
    level_energies: list = field(default_factory=list)


def _level_terms(ref, idx, level, frame, pose, prior, prior_info, mask, huber, jacobians):
    rays, vals, _ = ref.level(level)
    cam = ref.camera.at_level(level)
    out = warp_residuals(vals[idx], rays[idx], ref.idepth[idx], (ref.pose.R, ref.pose.t), (pose.R, pose.t),
                         frame.pyramid[level], cam, jacobians=jacobians)
    r, front, inb = out[:3]
    if mask is None:
        _, _, hok = ref.level(level)
        mask = hok[idx] & inb & front
    elif np.any(mask & ~front):
        return np.inf, None, None, mask, r
    E = float((huber_energy(r, huber) * mask).sum())
    rp = Jp = None
    if prior is not None:
        rp, _, Jp = relpose_residual_jacobian(prior.T, ref.pose, pose)
        E += float(rp @ prior_info @ rp)
    if not jacobians:
        return E, None, None, mask, r
    J = out[3]
    W = huber_weights(r, huber) * mask
    J2 = J.reshape(-1, 6)
    JW = J2 * W.reshape(-1, 1)
    H = JW.T @ J2
    b = -JW.T @ r.reshape(-1)
    if prior is not None:
        H += Jp.T @ prior_info @ Jp
        b -= Jp.T @ prior_info @ rp
    return E, H, b, mask, r


def track_frame(window, frame, prior=None, init=None, config=None):
    """Pose of ``frame`` (world-to-camera) aligned to the newest window keyframe.

    ``prior`` is a :class:`RelativePrior` from the reference keyframe to the
    frame; it sets the initial pose and adds a factor at every level with
    information ``w * Sigma^-1 * 4^-level``. Without a prior the pose starts
    from ``init`` (constant motion) or the reference pose.
    """
    cfg = config or TrackerConfig()
    if not window.keyframes:
        raise ConfigurationError("tracking needs a non-empty window")
    ref = window.keyframes[-1]
    if prior is not None:
        if prior.i != ref.id:
            raise ConfigurationError(f"tracking prior must start at reference keyframe {ref.id}")
        pose = prior.T.inverse() @ ref.pose
    else:
        pose = ref.pose if init is None else init
    idx = np.flatnonzero(ref.active() & (ref.idepth > 0))
    levels = min(ref.frame.levels, frame.levels)
    total_it, level_E = 0, []
    for level in reversed(range(levels)):
        info = None if prior is None else cfg.w * prior.information * 4.0**-level
        for _ in range(cfg.iterations):
            E, H, b, mask, _ = _level_terms(ref, idx, level, frame, pose, prior, info, None, cfg.huber, True)
            try:
                dx = np.linalg.solve(H, b)
            except np.linalg.LinAlgError:
                break
            if not np.all(np.isfinite(dx)) or np.linalg.norm(dx) < cfg.step_tolerance:
                break
            alpha, moved = 1.0, False
            for _ in range(cfg.max_halvings + 1):
                trial = pose.retract(alpha * dx)
                Et = _level_terms(ref, idx, level, frame, trial, prior, info, mask, cfg.huber, False)[0]
                if Et < E:
                    pose, moved = trial, True
                    small = E - Et < cfg.min_decrease * E
                    break
                alpha *= 0.5
            if not moved:
                break
            total_it += 1
            if small or alpha * np.linalg.norm(dx) < cfg.step_tolerance:
                break
        level_E.append(E)
    E, _, _, mask, r = _level_terms(ref, idx, 0, frame, pose, prior, None if prior is None else cfg.w * prior.information, None,
                                    cfg.huber, False)
    _, _, hok = ref.level(0)
    n_host = max(int(hok[idx].sum()), 1)
    rms = float(np.sqrt((r[mask] ** 2).mean())) if mask.any() else np.inf
    if mask.sum() < cfg.min_valid * n_host or rms > cfg.lost_threshold:
        raise TrackingLostError(f"tracking lost at frame {frame.id}: rms {rms:.4f}, {int(mask.sum())}/{n_host} residuals in view",
                                frame.id)
    return TrackResult(pose, E, rms, total_it, level_E)
