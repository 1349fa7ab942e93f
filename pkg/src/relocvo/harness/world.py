"""Procedural synthetic world: textured terrain seen by a downward camera.

The terrain and its intensity texture are sums of planar sinusoids, so
rendering is exact (ray cast per pixel centre) and deterministic. Landmarks
scattered over the terrain carry binary descriptors drawn around shared
prototypes so that a vocabulary has meaningful words.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, GenerationError
from ..geometry import SE3, CameraIntrinsics, so3_exp
from ..reloc import BINARY, FeatureSet, MapDatabase, MapKeyframe


def _waves(rng, n, wavelengths, amplitude):
    ang = rng.uniform(0, 2 * np.pi, n)
    lam = rng.uniform(*wavelengths, n)
    k = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    return k, rng.uniform(0, 2 * np.pi, n), np.full(n, amplitude / n)


def _eval_waves(waves, x, y):
    k, phase, amp = waves
    arg = x[..., None] * k[:, 0] + y[..., None] * k[:, 1] + phase
    return np.sin(arg) @ amp


def _eval_waves_grad(waves, x, y):
    k, phase, amp = waves
    arg = x[..., None] * k[:, 0] + y[..., None] * k[:, 1] + phase
    c = np.cos(arg) * amp
    return np.sin(arg) @ amp, c @ k[:, 0], c @ k[:, 1]


@dataclass
class WorldSpec:
    relief: float = 0.3
    relief_wavelengths: tuple = (6.0, 15.0)
    texture_amplitude: float = 0.35
    texture_wavelengths: tuple = (1.2, 5.0)
    texture_waves: int = 12
    landmark_density: float = 6.0  # per square meter
    landmark_height: float = 0.5
    n_prototypes: int = 256
    descriptor_bits: int = 256
    prototype_spread: float = 0.06  # bit-flip rate of a landmark around its prototype


@dataclass
class SyntheticWorld:
    seed: int
    spec: WorldSpec
    terrain: tuple
    texture: tuple
    landmarks: np.ndarray = None  # (N, 3)
    descriptors: np.ndarray = None  # (N, bits/8) packed

    @classmethod
    def create(cls, seed, spec=None, extent=None):
        """``extent = (xmin, xmax, ymin, ymax)`` bounds the landmark cloud."""
        spec = spec or WorldSpec()
        rng = np.random.default_rng([seed, 0])
        terrain = _waves(rng, 4, spec.relief_wavelengths, spec.relief)
        texture = _waves(rng, spec.texture_waves, spec.texture_wavelengths, spec.texture_amplitude)
        world = cls(seed, spec, terrain, texture)
        if extent is not None:
            world.scatter_landmarks(extent, np.random.default_rng([seed, 1]))
        return world

    def height(self, x, y):
        return _eval_waves(self.terrain, np.asarray(x, float), np.asarray(y, float))

    def intensity(self, x, y):
        return 0.5 + _eval_waves(self.texture, np.asarray(x, float), np.asarray(y, float))

    def scatter_landmarks(self, extent, rng):
        xmin, xmax, ymin, ymax = extent
        n = int(round(self.spec.landmark_density * (xmax - xmin) * (ymax - ymin)))
        x = rng.uniform(xmin, xmax, n)
        y = rng.uniform(ymin, ymax, n)
        z = self.height(x, y) + rng.uniform(0, self.spec.landmark_height, n)
        self.landmarks = np.stack([x, y, z], 1)
        bits = self.spec.descriptor_bits
        protos = rng.random((self.spec.n_prototypes, bits)) < 0.5
        which = rng.integers(0, len(protos), n)
        flips = rng.random((n, bits)) < self.spec.prototype_spread
        self.descriptors = np.packbits(protos[which] ^ flips, axis=1)

    # -- rendering ----------------------------------------------------------

    def raycast(self, center, dirs, iterations=20, tol=1e-12):
        """Intersect rays ``center + s * dirs`` (world frame) with the terrain (Newton on ``s``)."""
        dz = dirs[:, 2]
        if np.any(dz > -1e-6):
            raise GenerationError("ray does not point towards the ground")
        s = (self.height(center[0], center[1]) - center[2]) / dz
        for _ in range(iterations):
            p = center + s[:, None] * dirs
            h, hx, hy = _eval_waves_grad(self.terrain, p[:, 0], p[:, 1])
            step = (p[:, 2] - h) / (dz - hx * dirs[:, 0] - hy * dirs[:, 1])
            s = s - step
            if np.abs(step).max() < tol:
                break
        return center + s[:, None] * dirs

    def render(self, camera, pose, levels=3):
        """Image pyramid and level-0 depth map seen from world-to-camera ``pose``."""
        u, v = np.meshgrid(np.arange(camera.width, dtype=float), np.arange(camera.height, dtype=float))
        uv = np.stack([u.ravel(), v.ravel()], 1)
        rays_c = camera.bearings(uv)
        Rcw = pose.R.T
        center = pose.center()
        pts = self.raycast(center, rays_c @ Rcw.T)
        img = self.intensity(pts[:, 0], pts[:, 1]).reshape(camera.height, camera.width)
        depth = ((pts - center) @ Rcw)[:, 2].reshape(camera.height, camera.width)
        return build_pyramid(img, levels), depth

    def visible(self, camera, pose, margin=2.0):
        """Indices and pixels of landmarks in front of and inside the image."""
        Xc = self.landmarks @ pose.R.T + pose.t
        front = Xc[:, 2] > 0.1
        uv = np.full((len(Xc), 2), -1.0)
        uv[front] = Xc[front, :2] / Xc[front, 2:3] * [camera.fx, camera.fy] + [camera.cx, camera.cy]
        ok = front & camera.in_image(uv, margin)
        idx = np.flatnonzero(ok)
        return idx, uv[idx]


def build_pyramid(image, levels):
    pyr = [np.asarray(image, float)]
    for _ in range(levels - 1):
        im = pyr[-1]
        h, w = im.shape[0] // 2 * 2, im.shape[1] // 2 * 2
        im = im[:h, :w]
        pyr.append(0.25 * (im[0::2, 0::2] + im[1::2, 0::2] + im[0::2, 1::2] + im[1::2, 1::2]))
    return pyr


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class PathSpec:
    """Meandering path ``x = s, y = A sin(2 pi s / P)`` flown at ``altitude``."""

    speed: float = 0.1  # meters per frame
    amplitude: float = 1.0
    period: float = 15.0
    altitude: float = 4.0
    altitude_wobble: float = 0.2
    tilt_wobble: float = 0.03

    def position(self, s, lateral=0.0):
        y = self.amplitude * np.sin(2 * np.pi * s / self.period)
        dy = self.amplitude * 2 * np.pi / self.period * np.cos(2 * np.pi * s / self.period)
        normal = np.array([-dy, 1.0]) / np.hypot(1.0, dy)
        z = self.altitude + self.altitude_wobble * np.sin(2 * np.pi * s / 9.0)
        return np.array([s + lateral * normal[0], y + lateral * normal[1], z]), np.arctan2(dy, 1.0)

    def pose(self, s, lateral=0.0):
        """World-to-camera pose looking straight down, image top pointing forward."""
        c, yaw = self.position(s, lateral)
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        y_c = -fwd
        z_c = np.array([0.0, 0.0, -1.0])
        x_c = np.cross(y_c, z_c)
        wobble = self.tilt_wobble * np.array([np.sin(s / 2.3), np.sin(s / 3.1 + 1.0), 0.0])
        Rcw = np.stack([x_c, y_c, z_c], 1) @ so3_exp(wobble)
        R = Rcw.T
        return SE3(R, -R @ c)


@dataclass
class SequenceSpec:
    n_frames: int = 300
    fps: float = 10.0
    keyframe_every: int = 5
    levels: int = 3
    width: int = 64
    height: int = 64
    focal: float = 40.0
    path: PathSpec = field(default_factory=PathSpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    # odometry noise: body-frame perturbation of each rendered frame increment
    sigma_t: float = 0.002
    sigma_r: float = 0.001
    bias_t: float = 0.003
    bias_yaw: float = 0.002
    # relocalization corruption
    availability: float = 0.5
    reloc_sigma: float = 0.02
    reloc_sigma_r: float = 0.002
    flip_rate: float = 0.05
    jitter: float = 0.3  # pixels, query keypoints
    # map traversal
    map_lateral: float = 0.3
    map_phase: float = 0.5
    map_every: int = 5
    map_flip_rate: float = 0.0
    same_sequence: bool = False
    vocabulary_branching: int = 8
    vocabulary_depth: int = 3
    min_visible: int = 20

    def __post_init__(self):
        for name in ("availability", "flip_rate", "map_flip_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        for name in ("sigma_t", "sigma_r", "reloc_sigma", "reloc_sigma_r", "jitter"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.n_frames < 2 or self.keyframe_every < 1:
            raise ConfigurationError("need at least two frames and a positive keyframe interval")

    def camera(self):
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)

    def noiseless(self):
        """The idealised configuration: no odometry or relocalization corruption."""
        from dataclasses import replace

        return replace(self, sigma_t=0.0, sigma_r=0.0, bias_t=0.0, bias_yaw=0.0, reloc_sigma=0.0, reloc_sigma_r=0.0,
                       flip_rate=0.0, jitter=0.0, map_flip_rate=0.0, same_sequence=True)


@dataclass
class SyntheticSequence:
    spec: SequenceSpec
    camera: CameraIntrinsics
    timestamps: np.ndarray
    ground_truth: list  # world-to-camera SE3 per frame
    render_poses: list  # drift-corrupted poses the images were rendered from
    pyramids: list
    first_depth: np.ndarray  # level-0 depth map of frame 0
    features: list  # FeatureSet per frame (from the true pose)
    available: np.ndarray  # bool per frame: relocalization allowed
    reloc_noise: np.ndarray  # (n, 6) twist applied to relocalized poses

    @property
    def n_frames(self):
        return len(self.timestamps)

    def keyframe_ids(self):
        return list(range(0, self.n_frames, self.spec.keyframe_every))


def _drifted(gt, spec, rng):
    out = [gt[0]]
    bias = np.array([0.0, -spec.bias_t, 0.0, 0.0, 0.0, spec.bias_yaw])
    sig = np.array([spec.sigma_t] * 3 + [spec.sigma_r] * 3)
    for k in range(len(gt) - 1):
        step = gt[k + 1] @ gt[k].inverse()
        noise = bias + sig * rng.standard_normal(6)
        out.append(SE3.exp(noise) @ step @ out[-1])
    return out


def _view_features(world, camera, pose, flip_rate, jitter, rng, min_visible, where):
    idx, uv = world.visible(camera, pose)
    if len(idx) < min_visible:
        raise GenerationError(f"{where}: only {len(idx)} landmarks visible from camera at {np.round(pose.center(), 2).tolist()}")
    desc = world.descriptors[idx]
    if flip_rate > 0:
        bits = np.unpackbits(desc, axis=1)
        bits ^= (rng.random(bits.shape) < flip_rate).astype(np.uint8)
        desc = np.packbits(bits, axis=1)
    if jitter > 0:
        uv = uv + jitter * rng.standard_normal(uv.shape)
    # keypoints are stored as float32 on disk; generate them at that precision
    uv = uv.astype(np.float32).astype(float)
    return idx, FeatureSet(uv, np.ones(len(uv)), desc, BINARY)


def map_poses(spec):
    if spec.same_sequence:
        return [spec.path.pose(spec.path.speed * k) for k in range(0, spec.n_frames, spec.map_every)]
    n = int(np.ceil(spec.n_frames / spec.map_every))
    return [spec.path.pose(spec.path.speed * spec.map_every * (j + spec.map_phase), spec.map_lateral) for j in range(n)]


def _setup(spec, world_seed):
    gt = [spec.path.pose(spec.path.speed * k) for k in range(spec.n_frames)]
    mposes = map_poses(spec)
    centers = np.array([p.center() for p in gt + mposes])
    half = spec.path.altitude * max(spec.width, spec.height) / (2 * spec.focal) + 1.5
    extent = (centers[:, 0].min() - half, centers[:, 0].max() + half, centers[:, 1].min() - half, centers[:, 1].max() + half)
    return SyntheticWorld.create(world_seed, spec.world, extent), gt, mposes


def generate_map(spec, world_seed, seed=None):
    """Only the map database of :func:`generate` (identical to the one it returns)."""
    seed = world_seed if seed is None else seed
    world, _, mposes = _setup(spec, world_seed)
    return build_map(world, spec.camera(), mposes, spec, np.random.default_rng([seed, 5]))


def generate(spec, world_seed, seed=None):
    """Render a sequence and build its map database; deterministic in the seeds."""
    seed = world_seed if seed is None else seed
    camera = spec.camera()
    world, gt, mposes = _setup(spec, world_seed)

    rng = np.random.default_rng([seed, 2])
    render = _drifted(gt, spec, rng)
    pyramids, first_depth = [], None
    for k, pose in enumerate(render):
        pyr, depth = world.render(camera, pose, spec.levels)
        pyramids.append(pyr)
        if k == 0:
            first_depth = depth

    frng = np.random.default_rng([seed, 3])
    features = [_view_features(world, camera, g, spec.flip_rate, spec.jitter, frng, spec.min_visible, f"frame {k}")[1]
                for k, g in enumerate(gt)]
    arng = np.random.default_rng([seed, 4])
    available = arng.random(spec.n_frames) < spec.availability
    noise = arng.standard_normal((spec.n_frames, 6)) * ([spec.reloc_sigma] * 3 + [spec.reloc_sigma_r] * 3)

    db = build_map(world, camera, mposes, spec, np.random.default_rng([seed, 5]))
    seq = SyntheticSequence(spec, camera, np.arange(spec.n_frames) / spec.fps, gt, render, pyramids, first_depth,
                            features, available, noise)
    return seq, db, world


def build_map(world, camera, poses, spec, rng):
    kfs = {}
    for j, pose in enumerate(poses):
        idx, fs = _view_features(world, camera, pose, spec.map_flip_rate, 0.0, rng, spec.min_visible, f"map keyframe {j}")
        kfs[j] = MapKeyframe(j, pose, fs, np.arange(len(idx)), world.landmarks[idx])
    # short traversals cannot train a full tree: shrink its depth
    n_desc = sum(len(kf.features) for kf in kfs.values())
    depth = spec.vocabulary_depth
    while depth > 1 and spec.vocabulary_branching**depth > n_desc:
        depth -= 1
    return MapDatabase.build(camera, list(kfs.values()), branching=spec.vocabulary_branching, depth=depth,
                             seed=world.seed, levels=3)


def perturb_reloc(pose, twist):
    """Apply a relocalization error: camera centre moved by ``twist[:3]`` (world), small rotation ``twist[3:]``."""
    moved = pose @ SE3(np.eye(3), -np.asarray(twist[:3], float))
    return SE3(so3_exp(twist[3:]), np.zeros(3)) @ moved


# ---------------------------------------------------------------------------
# layout-ambiguous retrieval set
# ---------------------------------------------------------------------------


def layout_ambiguous_set(seed=0, n_pairs=20, n_features=120, n_queries=5, flip_rate=0.08, jitter=1.0, width=64, height=64):
    """Pairs of scenes sharing one descriptor bag laid out differently.

    Returns ``(database_features, queries)`` with ``queries`` a list of
    ``(FeatureSet, true_id)``; the true scene is the lower id in half of
    the pairs so that ties are uninformative.
    """
    rng = np.random.default_rng(seed)
    bits = 256
    protos = rng.random((n_pairs * 8, bits)) < 0.5
    db, queries = {}, []
    for p in range(n_pairs):
        which = rng.integers(p * 8, (p + 1) * 8, n_features)
        desc = protos[which] ^ (rng.random((n_features, bits)) < 0.04)
        # group words spatially so layout carries information
        order = np.argsort(which, kind="stable")
        desc = desc[order]
        xy_a = np.sort(rng.uniform([0, 0], [width - 1, height - 1], (n_features, 2)), axis=0)
        xy_b = xy_a[::-1].copy()
        xy_b[:, 1] = xy_a[:, 1]
        scenes = [xy_a, xy_b]
        ids = (2 * p, 2 * p + 1)
        for sid, xy in zip(ids, scenes):
            db[sid] = FeatureSet(xy, np.ones(n_features), np.packbits(desc, axis=1), BINARY)
        for q in range(n_queries):
            true = ids[(p + q) % 2]
            xy = scenes[true - 2 * p] + jitter * rng.standard_normal((n_features, 2))
            xy = np.clip(xy, 0, [width - 1, height - 1])
            qd = desc ^ (rng.random(desc.shape) < flip_rate)
            queries.append((FeatureSet(xy, np.ones(n_features), np.packbits(qd, axis=1), BINARY), true))
    return db, queries
