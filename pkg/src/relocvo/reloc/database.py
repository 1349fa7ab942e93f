"""Map database: keyframes with global poses, landmarks, features and a retrieval index.

On-disk layout (a directory)::

    trajectory.txt    TUM lines "id tx ty tz qx qy qz qw" (camera-to-map), "# RLMAP01" header
    features/<id>.bin one binary feature block per keyframe
    landmarks.bin     magic, u32 count, then (i32 keyframe, i32 feature, 3 x f64) records
    vocabulary.bin    flat node table
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..geometry import SE3, CameraIntrinsics, pose_from_fields, pose_to_fields
from .features import MAGIC, FeatureSet, read_features, write_features
from .retrieval import spatial_bow
from .vocabulary import build_vocabulary, load_vocabulary, save_vocabulary

_LANDMARK = np.dtype([("kf", "<i4"), ("feature", "<i4"), ("xyz", "<f8", (3,))])


@dataclass
class MapKeyframe:
    id: int
    pose: SE3  # map-to-camera
    features: FeatureSet
    landmark_features: np.ndarray  # feature indices with a landmark
    landmarks: np.ndarray  # (M, 3) map-frame points

    def __post_init__(self):
        self.landmark_features = np.asarray(self.landmark_features, dtype=int)
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        if len(self.landmark_features) != len(self.landmarks):
            raise ConfigurationError(f"keyframe {self.id}: landmark table length mismatch")
        if len(self.landmark_features) and (self.landmark_features.min() < 0 or self.landmark_features.max() >= len(self.features)):
            raise ConfigurationError(f"keyframe {self.id}: landmark links to a missing feature")
        if not np.all(np.isfinite(self.pose.matrix())):
            raise ConfigurationError(f"keyframe {self.id}: non-finite pose")
        self._matchable = None

    def matchable(self):
        """Features that carry a landmark, with landmarks in this keyframe's camera frame."""
        if self._matchable is None:
            self._matchable = (self.features.subset(self.landmark_features), self.pose.act(self.landmarks))
        return self._matchable


@dataclass
class MapDatabase:
    camera: CameraIntrinsics
    vocabulary: object
    keyframes: dict
    levels: int = 3
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {
                k: spatial_bow(kf.features, self.vocabulary, self.camera.width, self.camera.height, self.levels)
                for k, kf in self.keyframes.items()
            }

    @classmethod
    def build(cls, camera, keyframes, branching=8, depth=3, seed=0, levels=3, vocabulary=None):
        kfs = {kf.id: kf for kf in keyframes}
        if vocabulary is None:
            vocabulary = build_vocabulary([kf.features for kf in kfs.values()], branching, depth, seed)
        return cls(camera, vocabulary, kfs, levels)

    def __len__(self):
        return len(self.keyframes)

    def pose(self, kf_id):
        return self.keyframes[kf_id].pose

    # -- persistence -------------------------------------------------------

    def save(self, path):
        os.makedirs(os.path.join(path, "features"), exist_ok=True)
        c = self.camera
        with open(os.path.join(path, "trajectory.txt"), "w") as fh:
            fh.write("# RLMAP01\n")
            fh.write(f"# camera {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r} {c.width} {c.height} levels {self.levels}\n")
            for k in sorted(self.keyframes):
                fh.write(f"{k} {pose_to_fields(self.keyframes[k].pose.inverse())}\n")
        rows = []
        for k in sorted(self.keyframes):
            kf = self.keyframes[k]
            write_features(os.path.join(path, "features", f"{k:06d}.bin"), kf.features)
            for fi, x in zip(kf.landmark_features, kf.landmarks):
                rows.append((k, fi, x))
        table = np.array(rows, dtype=_LANDMARK) if rows else np.zeros(0, dtype=_LANDMARK)
        with open(os.path.join(path, "landmarks.bin"), "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", len(table)) + table.tobytes())
        save_vocabulary(os.path.join(path, "vocabulary.bin"), self.vocabulary)

    @classmethod
    def load(cls, path):
        traj = os.path.join(path, "trajectory.txt")
        with open(traj) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != "# RLMAP01":
            raise ConfigurationError(f"{traj}: missing RLMAP01 header")
        camera, levels, poses = None, 3, {}
        for line in lines[1:]:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if len(parts) >= 8 and parts[1] == "camera":
                    fx, fy, cx, cy = map(float, parts[2:6])
                    camera = CameraIntrinsics(fx, fy, cx, cy, int(parts[6]), int(parts[7]))
                    if len(parts) >= 10 and parts[8] == "levels":
                        levels = int(parts[9])
                continue
            poses[int(float(parts[0]))] = pose_from_fields(parts[1:8]).inverse()
        if camera is None:
            raise ConfigurationError(f"{traj}: missing camera line")
        with open(os.path.join(path, "landmarks.bin"), "rb") as fh:
            data = fh.read()
        if not data.startswith(MAGIC):
            raise ConfigurationError("landmarks.bin: missing RLMAP01 header")
        (n,) = struct.unpack_from("<I", data, len(MAGIC))
        table = np.frombuffer(data, dtype=_LANDMARK, count=n, offset=len(MAGIC) + 4)
        kfs = {}
        for k, pose in poses.items():
            feats = read_features(os.path.join(path, "features", f"{k:06d}.bin"))
            rows = table[table["kf"] == k]
            kfs[k] = MapKeyframe(k, pose, feats, rows["feature"].astype(int), rows["xyz"].copy())
        return cls(camera, load_vocabulary(os.path.join(path, "vocabulary.bin")), kfs, levels)
