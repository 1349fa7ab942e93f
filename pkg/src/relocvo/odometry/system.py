"""Frame-by-frame driver: tracking, keyframe creation, BA, marginalization."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ConfigurationError
from ..geometry import SE3
from .frames import Keyframe, select_points
from .photometric import HUBER
from .tracker import TrackerConfig, track_frame
from .window import MarginalizationEvent, RelativePrior, Window, marginalize_keyframe, windowed_ba


@dataclass
class OdometryConfig:
    window_size: int = 7
    keyframe_every: int = 5
    w: float = 1e3
    prior_information: object = 1e2  # scalar or 6 diagonal entries (rho, omega)
    max_priors: int = 2
    front_end_prior: bool = True
    back_end_prior: bool = True
    ba_iterations: int = 6
    ba_decrease: float = 1e-2  # stop BA when a step gains less than this fraction of the energy
    point_block: int = 6
    min_gradient: float = 1e-3
    huber: float = HUBER
    tracker: TrackerConfig = field(default_factory=TrackerConfig)

    def __post_init__(self):
        if self.window_size < 2:
            raise ConfigurationError("window must hold at least two keyframes")
        if self.keyframe_every < 1:
            raise ConfigurationError("keyframe interval must be positive")
        if self.w < 0:
            raise ConfigurationError("prior weight must be non-negative")
        info = np.broadcast_to(np.asarray(self.prior_information, float), (6,))
        if np.any(info < 0):
            raise ConfigurationError("prior information must be non-negative")

    def information(self):
        return np.diag(np.broadcast_to(np.asarray(self.prior_information, float), (6,)).copy())


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    pose: SE3
    energy: float
    keyframe: bool
    prior: bool


@dataclass
class WindowLog:
    frame_id: int
    photo: float
    pose: float
    total: float
    iterations: int


class DirectOdometry:
    """Sliding-window direct odometry fed one frame (and optional relocalization) at a time."""

    def __init__(self, camera, config=None, initial_pose=None, initial_depth=None):
        self.camera = camera
        self.config = config or OdometryConfig()
        cfg = self.config
        self.window = Window(cfg.window_size, cfg.w, cfg.information(), cfg.back_end_prior, cfg.max_priors)
        self.initial_pose = initial_pose or SE3.identity()
        self.initial_depth = initial_depth
        self.records = []
        self.energy_log = []
        self.keyframe_poses = {}  # final pose of every keyframe that left the window
        self.timestamps = {}
        self.keyframe_seconds = []  # wall time of marginalization + BA per keyframe
        self._count = 0
        self._last_rel = None  # last frame pose relative to the reference keyframe
        self._velocity = None

    # -- keyframes -----------------------------------------------------------

    def _initial_depths(self, uv, pose):
        """Inverse depths for new points, interpolated from window points projected into ``pose``."""
        samples, values = [], []
        for kf in self.window.keyframes:
            act = np.flatnonzero(kf.active())
            if not len(act):
                continue
            rays = kf.level(0)[0][act, 4]
            R = pose.R @ kf.pose.R.T
            t = pose.t - R @ kf.pose.t
            Y = rays @ R.T + kf.idepth[act, None] * t
            ok = Y[:, 2] > 1e-6
            uvp = Y[ok, :2] / Y[ok, 2:3] * [self.camera.fx, self.camera.fy] + [self.camera.cx, self.camera.cy]
            inside = self.camera.in_image(uvp, -4.0)
            samples.append(uvp[inside])
            values.append((kf.idepth[act][ok] / Y[ok, 2])[inside])
        if not samples or not sum(len(s) for s in samples):
            ref = self.window.keyframes[-1]
            return np.full(len(uv), np.median(ref.idepth[ref.active()]))
        samples = np.concatenate(samples)
        values = np.concatenate(values)
        k = min(4, len(samples))
        d, i = cKDTree(samples).query(uv, k=k)
        d, i = d.reshape(len(uv), k), i.reshape(len(uv), k)
        wts = 1.0 / (d + 0.5)
        return (wts * values[i]).sum(1) / wts.sum(1)

    def _make_keyframe(self, frame, pose, reloc):
        cfg = self.config
        uv = select_points(frame.pyramid[0], cfg.point_block, 3, cfg.min_gradient)
        if not self.window.keyframes:
            if self.initial_depth is None:
                raise ConfigurationError("the first keyframe needs a depth map")
            depth = np.asarray(self.initial_depth)[uv[:, 1].astype(int), uv[:, 0].astype(int)]
            return Keyframe(frame, pose, self.camera, uv, 1.0 / depth, fixed_depth=True, reloc=reloc)
        return Keyframe(frame, pose, self.camera, uv, self._initial_depths(uv, pose), reloc=reloc)

    # -- frames --------------------------------------------------------------

    def process(self, frame, reloc=None):
        """Track ``frame``; returns the marginalization events it triggered."""
        cfg = self.config
        self.timestamps[frame.id] = frame.timestamp
        is_kf = self._count % cfg.keyframe_every == 0
        self._count += 1
        if not self.window.keyframes:
            kf = self._make_keyframe(frame, self.initial_pose, reloc)
            self.window.add(kf)
            self.records.append(FrameRecord(frame.id, frame.timestamp, kf.pose, 0.0, True, False))
            self._last_rel = SE3.identity()
            return []
        ref = self.window.keyframes[-1]
        prior = None
        if cfg.front_end_prior and reloc is not None and ref.reloc is not None:
            prior = RelativePrior(ref.id, frame.id, ref.reloc.pose @ reloc.pose.inverse(), self.window.information)
        last = (self._last_rel @ ref.pose).normalized()
        init = last if self._velocity is None else (self._velocity @ last).normalized()
        res = track_frame(self.window, frame, prior, init, cfg.tracker)
        self._velocity = (res.pose @ last.inverse()).normalized()
        self._last_rel = (res.pose @ ref.pose.inverse()).normalized()
        self.records.append(FrameRecord(frame.id, frame.timestamp, res.pose, res.energy, is_kf, prior is not None))
        if not is_kf:
            return []
        events = []
        t0 = time.perf_counter()
        if self.window.full():
            events.append(self._marginalize_oldest())
        kf = self._make_keyframe(frame, res.pose, reloc)
        self.window.add(kf)
        ba = windowed_ba(self.window, cfg.ba_iterations, huber=cfg.huber, decrease_tolerance=cfg.ba_decrease)
        self.keyframe_seconds.append(time.perf_counter() - t0)
        fin = ba.final
        self.energy_log.append(WindowLog(frame.id, fin.photo, fin.pose, fin.total, ba.iterations))
        self._last_rel = SE3.identity()
        return events

    def _marginalize_oldest(self):
        oldest = self.window.keyframes[0]
        ev = marginalize_keyframe(self.window, oldest.id, self.config.huber)
        self.keyframe_poses[oldest.id] = ev.pose
        return ev

    def finish(self):
        """Flush the window at the end of the sequence, oldest first."""
        events = []
        while len(self.window) > 1:
            events.append(self._marginalize_oldest())
        if self.window.keyframes:
            kf = self.window.keyframes.pop()
            self.keyframe_poses[kf.id] = kf.pose
            events.append(MarginalizationEvent(kf, kf.pose, kf.reloc))
        return events

    def keyframe_trajectory(self):
        """Final poses of retired keyframes plus current estimates of active ones."""
        out = dict(self.keyframe_poses)
        out.update(self.window.poses())
        return out


def write_energy_log(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "E_photo", "E_pose", "E_total", "iterations"])
        for g in logs:
            w.writerow([g.frame_id, f"{g.photo:.12g}", f"{g.pose:.12g}", f"{g.total:.12g}", g.iterations])
