"""Frames, keyframes and their hosted photometric points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ObservationInvalid
from ..geometry import SE3, CameraIntrinsics
from .photometric import PATTERN, bilinear, inside, pattern_rays, warp_residuals

ACTIVE = "active"
MARGINALIZED = "marginalized"
DROPPED = "dropped"


@dataclass
class Frame:
    id: int
    timestamp: float
    pyramid: list
    features: object = None

    def __post_init__(self):
        self.pyramid = [np.asarray(im, dtype=float) for im in self.pyramid]
        for lo, hi in zip(self.pyramid, self.pyramid[1:]):
            if hi.shape != (lo.shape[0] // 2, lo.shape[1] // 2):
                raise ConfigurationError("pyramid levels must halve in size")
        if not all(np.isfinite(im).all() for im in self.pyramid):
            raise ConfigurationError("frame intensities must be finite")

    @property
    def levels(self):
        return len(self.pyramid)

    @property
    def shape(self):
        return self.pyramid[0].shape


@dataclass
class PhotoPoint:
    host: int
    uv: np.ndarray
    idepth: float
    status: str = ACTIVE
    pattern: np.ndarray = field(default_factory=lambda: PATTERN.copy())


@dataclass
class Keyframe:
    """A keyframe and the points it hosts, stored as arrays."""

    frame: Frame
    pose: SE3  # world-to-camera, odometry frame
    camera: CameraIntrinsics
    uv: np.ndarray = None  # (n, 2) level-0 pixels
    idepth: np.ndarray = None
    status: np.ndarray = None
    fixed_depth: bool = False  # depths known (first keyframe) and held constant
    reloc: object = None
    _levels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.uv = np.zeros((0, 2)) if self.uv is None else np.asarray(self.uv, float).reshape(-1, 2)
        n = len(self.uv)
        self.idepth = np.ones(n) if self.idepth is None else np.asarray(self.idepth, float).copy()
        self.status = np.full(n, ACTIVE, dtype=object) if self.status is None else np.asarray(self.status, dtype=object)
        if len(self.idepth) != n or len(self.status) != n:
            raise ConfigurationError("point arrays differ in length")
        if not (np.isfinite(self.pose.R).all() and np.isfinite(self.pose.t).all()):
            raise ConfigurationError("keyframe pose must be finite")

    @property
    def id(self):
        return self.frame.id

    def __len__(self):
        return len(self.uv)

    def active(self):
        return self.status == ACTIVE

    def point(self, i):
        return PhotoPoint(self.id, self.uv[i].copy(), float(self.idepth[i]), self.status[i])

    def points(self):
        return [self.point(i) for i in range(len(self))]

    def level(self, level=0):
        """Pattern rays, host intensities and host-validity for pyramid ``level`` (cached)."""
        if level not in self._levels:
            rays, pix = pattern_rays(self.camera, self.uv, level)
            img = self.frame.pyramid[level]
            vals, _ = bilinear(img, pix)
            self._levels[level] = (rays, vals, inside(img.shape, pix))
        return self._levels[level]


def select_points(image, block=6, margin=3, min_gradient=1e-3):
    """Highest-gradient pixel per ``block`` x ``block`` cell, away from the border."""
    gy, gx = np.gradient(image)
    mag = np.hypot(gx, gy)
    h, w = image.shape
    out = []
    for y0 in range(margin, h - margin, block):
        for x0 in range(margin, w - margin, block):
            cell = mag[y0 : min(y0 + block, h - margin), x0 : min(x0 + block, w - margin)]
            iy, ix = np.unravel_index(np.argmax(cell), cell.shape)
            if cell[iy, ix] >= min_gradient:
                out.append((x0 + ix, y0 + iy))
    return np.array(out, dtype=float).reshape(-1, 2)


def photometric_residual(point, host, target, target_pose=None, level=0):
    """8 residuals of ``point`` (hosted in ``host``) observed in ``target``.

    ``target`` is a Keyframe or a Frame plus ``target_pose``. Returns
    ``(r, J_host, J_target, J_idepth)``; raises :class:`ObservationInvalid`
    when the warped pattern leaves the image or falls behind the camera.
    """
    if point.host != host.id:
        raise ConfigurationError("point is not hosted in this keyframe")
    frame = target.frame if isinstance(target, Keyframe) else target
    pose = target.pose if target_pose is None else target_pose
    cam = host.camera.at_level(level)
    pix = (np.asarray(point.uv, float) + 0.5) * 0.5**level - 0.5 + PATTERN
    img_h = host.frame.pyramid[level]
    if not inside(img_h.shape, pix).all():
        raise ObservationInvalid("pattern leaves the host image")
    vals, _ = bilinear(img_h, pix)
    rays = cam.bearings(pix)[None]
    r, front, inb, J_t, J_rho = warp_residuals(vals[None], rays, np.array([point.idepth]), (host.pose.R, host.pose.t),
                                               (pose.R, pose.t), frame.pyramid[level], cam)
    if point.idepth <= 0 or not front.all() or not inb.all():
        raise ObservationInvalid(f"point of keyframe {host.id} not observable in frame {frame.id}")
    return r[0], -J_t[0], J_t[0], J_rho[0]
