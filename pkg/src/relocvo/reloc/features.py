"""Keypoints + descriptors, descriptor distances and the binary feature-block format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import ConfigurationError

MAGIC = b"RLMAP01\n"
BINARY, REAL = "binary", "real"
_KIND_TAG = {BINARY: 0, REAL: 1}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


@dataclass
class FeatureSet:
    """Keypoints (N x 2 pixels), responses (N,) and descriptors.

    Binary descriptors are packed bits, ``uint8`` of shape (N, length // 8);
    real-valued descriptors are ``float32`` (N, length).
    """

    keypoints: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    kind: str = BINARY

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.kind == BINARY:
            self.descriptors = np.asarray(self.descriptors, dtype=np.uint8)
        elif self.kind == REAL:
            self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        else:
            raise ConfigurationError(f"unknown descriptor kind {self.kind!r}")
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.keypoints), -1)
        if not (len(self.keypoints) == len(self.scores) == len(self.descriptors)):
            raise ConfigurationError("keypoints, scores and descriptors differ in length")

    def __len__(self):
        return len(self.keypoints)

    @property
    def length(self):
        """Descriptor length (bits for binary, dimensions for real-valued)."""
        width = self.descriptors.shape[1]
        return width * 8 if self.kind == BINARY else width

    def subset(self, idx):
        return FeatureSet(self.keypoints[idx], self.scores[idx], self.descriptors[idx], self.kind)

    @classmethod
    def empty(cls, kind=BINARY, length=256):
        width = length // 8 if kind == BINARY else length
        dtype = np.uint8 if kind == BINARY else np.float32
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, width), dtype), kind)


def hamming_matrix(A, B):
    """Pairwise Hamming distances between packed binary descriptors."""
    A = np.asarray(A, dtype=np.uint8)
    B = np.asarray(B, dtype=np.uint8)
    a = np.unpackbits(A, axis=1).astype(np.float32)
    b = np.unpackbits(B, axis=1).astype(np.float32)
    # |a xor b| = |a| + |b| - 2 a.b, exact in float32 for these bit counts
    out = a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.rint(out).astype(np.int32)


def distance_matrix(A, B, kind):
    if kind == BINARY:
        return hamming_matrix(A, B).astype(float)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    return cdist(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


# ---------------------------------------------------------------------------
# binary block: magic, count u32, kind u8, length u32, keypoints, descriptors
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IBI")


def pack_features(fs):
    kp = np.empty((len(fs), 3), dtype="<f4")
    kp[:, :2] = fs.keypoints
    kp[:, 2] = fs.scores
    desc = fs.descriptors.astype("<f4") if fs.kind == REAL else fs.descriptors.astype(np.uint8)
    return MAGIC + _HEADER.pack(len(fs), _KIND_TAG[fs.kind], fs.length) + kp.tobytes() + desc.tobytes()


def unpack_features(data):
    if not data.startswith(MAGIC):
        raise ConfigurationError("feature block lacks RLMAP01 header")
    off = len(MAGIC)
    n, tag, length = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if tag not in _TAG_KIND:
        raise ConfigurationError(f"unknown kind tag {tag}")
    kind = _TAG_KIND[tag]
    kp = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    off += kp.nbytes
    if kind == BINARY:
        desc = np.frombuffer(data, dtype=np.uint8, count=n * (length // 8), offset=off).reshape(n, length // 8)
    else:
        desc = np.frombuffer(data, dtype="<f4", count=n * length, offset=off).reshape(n, length)
    return FeatureSet(kp[:, :2].astype(float), kp[:, 2].astype(float), desc.copy(), kind)


def write_features(path, fs):
    with open(path, "wb") as fh:
        fh.write(pack_features(fs))


def read_features(path):
    with open(path, "rb") as fh:
        return unpack_features(fh.read())
