"""Hierarchical k-means vocabulary tree with idf word weights."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, VocabularyBuildError
from .features import _KIND_TAG, _POPCOUNT, _TAG_KIND, BINARY, MAGIC, REAL, distance_matrix


def _majority(bits_packed):
    bits = np.unpackbits(bits_packed, axis=1)
    return np.packbits(bits.mean(axis=0) > 0.5)


def _center(members, kind):
    if kind == BINARY:
        return _majority(members)
    return members.mean(axis=0).astype(np.float32)


def kmeans(data, k, kind, rng, iterations=10):
    """Seeded k-means (k-majority for binary data). Always returns exactly ``k`` centres.

    With fewer samples than ``k`` the samples are repeated cyclically, so
    quantization stays total on degenerate inputs.
    """
    n = len(data)
    if n <= k:
        centers = data[np.arange(k) % n].copy()
        return centers, np.arange(n) % k
    # k-means++ seeding
    idx = [int(rng.integers(n))]
    d = distance_matrix(data, data[idx], kind)[:, 0]
    for _ in range(1, k):
        w = d * d if kind == REAL else d
        total = w.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=w / total))
        idx.append(nxt)
        d = np.minimum(d, distance_matrix(data, data[[nxt]], kind)[:, 0])
    centers = data[idx].copy()
    assign = None
    for _ in range(iterations):
        new = np.argmin(distance_matrix(data, centers, kind), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = data[assign == c]
            if len(members):
                centers[c] = _center(members, kind)
    return centers, assign


@dataclass
class Vocabulary:
    """Complete k-ary tree stored breadth-first; node 0 is the root.

    The children of internal node ``p`` are ``first_child[p] + arange(k)``.
    Leaves carry word ids ``0 .. k**depth - 1`` in breadth-first order.
    """

    kind: str
    length: int
    branching: int
    depth: int
    centers: np.ndarray
    weights: np.ndarray  # idf per word

    @property
    def n_words(self):
        return self.branching**self.depth

    @property
    def n_nodes(self):
        return len(self.centers)

    @property
    def first_leaf(self):
        return self.n_nodes - self.n_words

    def first_child(self, node):
        return node * self.branching + 1

    def quantize(self, descriptors):
        """Word id for each descriptor (greedy descent, ties to the lowest child)."""
        descriptors = np.asarray(descriptors)
        n = len(descriptors)
        node = np.zeros(n, dtype=np.int64)
        if n == 0:
            return node
        k = self.branching
        for _ in range(self.depth):
            children = node[:, None] * k + 1 + np.arange(k)[None, :]
            C = self.centers[children]  # (n, k, width)
            if self.kind == BINARY:
                dist = _POPCOUNT[descriptors[:, None, :] ^ C].sum(axis=2)
            else:
                dist = np.linalg.norm(descriptors[:, None, :].astype(float) - C, axis=2)
            node = children[np.arange(n), np.argmin(dist, axis=1)]
        return node - self.first_leaf

    def transform(self, descriptors):
        words = self.quantize(descriptors)
        return words, self.weights[words]


def build_vocabulary(training, branching=8, depth=3, seed=0, kind=None, iterations=10):
    """Build a vocabulary from a list of per-image descriptor arrays (or FeatureSets)."""
    docs = [getattr(t, "descriptors", t) for t in training]
    if kind is None:
        kind = getattr(training[0], "kind", BINARY) if training else BINARY
    docs = [np.asarray(d, dtype=np.uint8 if kind == BINARY else np.float32) for d in docs]
    if branching < 2 or depth < 1:
        raise ConfigurationError("vocabulary needs branching >= 2 and depth >= 1")
    data = np.concatenate(docs) if docs else np.zeros((0, 0))
    n_words = branching**depth
    if len(data) < n_words:
        raise VocabularyBuildError(f"need at least {n_words} training descriptors, got {len(data)}")
    rng = np.random.default_rng(seed)
    n_nodes = (branching ** (depth + 1) - 1) // (branching - 1)
    centers = np.zeros((n_nodes, data.shape[1]), dtype=data.dtype)
    members = {0: np.arange(len(data))}
    centers[0] = _center(data, kind)
    first_leaf = n_nodes - n_words
    for node in range(first_leaf):  # breadth-first over internal nodes
        idx = members.pop(node)
        if len(idx) == 0:
            sub_centers = np.repeat(centers[node][None], branching, axis=0)
            assign = np.zeros(0, dtype=int)
        else:
            sub_centers, assign = kmeans(data[idx], branching, kind, rng, iterations)
        first = node * branching + 1
        for c in range(branching):
            centers[first + c] = sub_centers[c]
            members[first + c] = idx[assign == c]
    voc = Vocabulary(kind, data.shape[1] * (8 if kind == BINARY else 1), branching, depth, centers, np.zeros(n_words))
    voc.weights = idf_weights(voc, docs)
    return voc


def idf_weights(voc, docs):
    """``ln(N / n_w)`` with ``n_w`` the number of training images containing word ``w``; 0 for unseen words."""
    N = len(docs)
    counts = np.zeros(voc.n_words)
    for d in docs:
        counts[np.unique(voc.quantize(d))] += 1
    with np.errstate(divide="ignore"):
        return np.where(counts > 0, np.log(N / np.maximum(counts, 1)), 0.0)


# ---------------------------------------------------------------------------
# flat node table: (parent i32, word i32, weight f64, centre) per node
# ---------------------------------------------------------------------------

_VOC_HEADER = struct.Struct("<BIIII")


def _node_dtype(kind, width):
    centre = ("<f4", (width,)) if kind == REAL else ("u1", (width,))
    return np.dtype([("parent", "<i4"), ("word", "<i4"), ("weight", "<f8"), ("center",) + centre])


def save_vocabulary(path, voc):
    width = voc.centers.shape[1]
    table = np.zeros(voc.n_nodes, dtype=_node_dtype(voc.kind, width))
    nodes = np.arange(voc.n_nodes)
    table["parent"] = np.where(nodes == 0, -1, (nodes - 1) // voc.branching)
    table["word"] = np.where(nodes >= voc.first_leaf, nodes - voc.first_leaf, -1)
    leaf = nodes >= voc.first_leaf
    table["weight"][leaf] = voc.weights
    table["center"] = voc.centers
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_VOC_HEADER.pack(_KIND_TAG[voc.kind], voc.length, voc.branching, voc.depth, voc.n_nodes))
        fh.write(table.tobytes())


def load_vocabulary(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not an RLMAP01 vocabulary")
    tag, length, k, depth, n_nodes = _VOC_HEADER.unpack_from(data, len(MAGIC))
    kind = _TAG_KIND[tag]
    width = length // 8 if kind == BINARY else length
    table = np.frombuffer(data, dtype=_node_dtype(kind, width), count=n_nodes, offset=len(MAGIC) + _VOC_HEADER.size)
    leaf = table["word"] >= 0
    weights = np.zeros(k**depth)
    weights[table["word"][leaf]] = table["weight"][leaf]
    return Vocabulary(kind, length, k, depth, table["center"].copy(), weights)
