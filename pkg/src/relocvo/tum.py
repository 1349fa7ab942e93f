"""TUM trajectory files: ``timestamp tx ty tz qx qy qz qw [s]`` of camera-to-world poses."""

from __future__ import annotations

from .geometry import pose_from_fields, pose_to_fields


def format_line(timestamp, pose):
    """``pose`` is world-to-camera; the file stores its inverse."""
    return f"{timestamp:.6f} {pose_to_fields(pose.inverse())}\n"


def write_tum(path, poses, timestamps, header=None):
    """Write ``{id: world-to-camera pose}`` sorted by id; ``timestamps[id]`` gives the time."""
    with open(path, "w") as fh:
        fh.write(header or "# timestamp tx ty tz qx qy qz qw\n")
        for k in sorted(poses):
            fh.write(format_line(timestamps[k], poses[k]))


def append_tum(fh, timestamp, pose):
    fh.write(format_line(timestamp, pose))


def read_tum(path):
    """List of ``(timestamp, world-to-camera pose)``."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            out.append((float(parts[0]), pose_from_fields(parts[1:]).inverse()))
    return out
