"""On-disk layout of generated sequences and pipeline runs."""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigurationError
from ..fusion import write_fused_tum, write_fusion_log
from ..geometry import SE3, CameraIntrinsics, Sim3, pose_from_fields
from ..odometry import write_energy_log
from ..reloc import read_features, write_features
from ..tum import read_tum, write_tum
from .world import SyntheticSequence


def save_sequence(seq, directory):
    os.makedirs(os.path.join(directory, "features"), exist_ok=True)
    c = seq.camera
    arrays = {
        "camera": np.array([c.fx, c.fy, c.cx, c.cy, c.width, c.height], float),
        "timestamps": np.asarray(seq.timestamps, float),
        "ground_truth": np.stack([p.matrix() for p in seq.ground_truth]),
        "render_poses": np.stack([p.matrix() for p in seq.render_poses]),
        "first_depth": seq.first_depth,
        "available": np.asarray(seq.available, bool),
        "reloc_noise": seq.reloc_noise,
    }
    for level in range(len(seq.pyramids[0])):
        arrays[f"level{level}"] = np.stack([pyr[level] for pyr in seq.pyramids])
    np.savez(os.path.join(directory, "sequence.npz"), **arrays)
    for k, fs in enumerate(seq.features):
        write_features(os.path.join(directory, "features", f"{k:06d}.bin"), fs)
    ids = range(seq.n_frames)
    write_tum(os.path.join(directory, "groundtruth.txt"), dict(zip(ids, seq.ground_truth)), dict(zip(ids, seq.timestamps)))


def load_sequence(directory, spec):
    path = os.path.join(directory, "sequence.npz")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: no generated sequence here")
    with np.load(path) as z:
        fx, fy, cx, cy, w, h = z["camera"]
        camera = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
        n = len(z["timestamps"])
        levels = sorted(k for k in z.files if k.startswith("level"))
        stacks = [z[k] for k in levels]
        pyramids = [[s[i] for s in stacks] for i in range(n)]
        gt = [SE3.from_matrix(m) for m in z["ground_truth"]]
        render = [SE3.from_matrix(m) for m in z["render_poses"]]
        features = [read_features(os.path.join(directory, "features", f"{k:06d}.bin")) for k in range(n)]
        return SyntheticSequence(spec, camera, z["timestamps"].copy(), gt, render, pyramids, z["first_depth"].copy(),
                                 features, z["available"].copy(), z["reloc_noise"].copy())


def write_run(directory, result):
    """Trajectories (TUM) and logs of a pipeline run."""
    os.makedirs(directory, exist_ok=True)
    ts = result.timestamps
    write_tum(os.path.join(directory, "odometry.txt"), result.odometry, ts)
    write_tum(os.path.join(directory, "reloc.txt"), {k: r.pose for k, r in result.reloc.items()}, ts)
    write_energy_log(os.path.join(directory, "energy.csv"), result.energy_log)
    if result.fused is not None:
        write_fused_tum(os.path.join(directory, "fused.txt"), result.fused, ts)
        write_fusion_log(os.path.join(directory, "fusion.csv"), result.fusion_log)
    with open(os.path.join(directory, "status.txt"), "w") as fh:
        fh.write(f"mode {result.mode}\n")
        fh.write(f"fusion {result.fused_flag}\n")
        fh.write(f"keyframes {len(result.odometry)}\n")
        fh.write("complete\n" if result.complete else f"lost {result.lost_at}\n")


def _ids_by_time(entries, timestamps):
    lookup = {round(float(t), 6): k for k, t in enumerate(timestamps)}
    out = {}
    for t, pose in entries:
        k = lookup.get(round(t, 6))
        if k is None:
            raise ConfigurationError(f"trajectory time {t} matches no frame of the sequence")
        out[k] = pose
    return out


def read_trajectory(path, timestamps):
    """``{frame id: world-to-camera pose}`` from a TUM file, ids recovered from the frame times."""
    return _ids_by_time(read_tum(path), timestamps)


def read_fused(path, timestamps):
    """Fused Sim(3) world-to-camera poses from a TUM file with a scale column."""
    entries = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            g = pose_from_fields(parts[1:9])
            entries.append((float(parts[0]), (g if isinstance(g, Sim3) else Sim3.from_se3(g)).inverse()))
    return _ids_by_time(entries, timestamps)
