"""Spatial-pyramid bag-of-words vectors, pyramid-match scoring and candidate retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass
class SpatialBowVector:
    """``levels[l]`` is a (4**l, n_words) histogram of idf-weighted word counts."""

    levels: list

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def n_words(self):
        return self.levels[0].shape[1]

    @property
    def mass(self):
        return float(self.levels[0].sum())

    def level0(self):
        return self.levels[0][0]


def cell_index(keypoints, width, height, level):
    g = 1 << level
    kp = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    cx = np.clip((kp[:, 0] * g / width).astype(int), 0, g - 1)
    cy = np.clip((kp[:, 1] * g / height).astype(int), 0, g - 1)
    return cy * g + cx


def spatial_bow(features, vocabulary, width, height, levels=3):
    words, weights = vocabulary.transform(features.descriptors)
    out = []
    for lvl in range(levels):
        hist = np.zeros((4**lvl, vocabulary.n_words))
        if len(words):
            np.add.at(hist, (cell_index(features.keypoints, width, height, lvl), words), weights)
        out.append(hist)
    return SpatialBowVector(out)


def level_weights(n_levels):
    """Weight of a match first found at level ``l``: ``1 / 2**(L - l)``."""
    return np.array([0.5 ** (n_levels - lvl) for lvl in range(n_levels)])


def _pyramid_kernel(a, b):
    inter = [float(np.minimum(x, y).sum()) for x, y in zip(a.levels, b.levels)] + [0.0]
    w = level_weights(a.n_levels)
    # matches found at level l but not at the finer level l + 1
    return float(sum(w[lvl] * (inter[lvl] - inter[lvl + 1]) for lvl in range(a.n_levels)))


def _check(a, b):
    if a.n_levels != b.n_levels or a.n_words != b.n_words:
        raise ConfigurationError("spatial BoW vectors differ in vocabulary size or pyramid levels")


def spatial_similarity(a, b):
    """Pyramid-match score normalised by the geometric mean of the self-similarities."""
    _check(a, b)
    ma, mb = a.mass, b.mass
    if ma == 0.0 and mb == 0.0:
        return 1.0
    if ma == 0.0 or mb == 0.0:
        return 0.0
    # the self-kernel of a vector only sees finest-level matches
    w_fine = level_weights(a.n_levels)[-1]
    return min(1.0, _pyramid_kernel(a, b) / (w_fine * math.sqrt(ma * mb)))


def bow_similarity(a, b):
    """Plain (level-0) histogram-intersection score with the same normalisation."""
    _check(a, b)
    ma, mb = a.mass, b.mass
    if ma == 0.0 and mb == 0.0:
        return 1.0
    if ma == 0.0 or mb == 0.0:
        return 0.0
    return min(1.0, float(np.minimum(a.level0(), b.level0()).sum()) / math.sqrt(ma * mb))


def retrieve_candidates(query, db, previous=None, window=30, top_k=3, score=spatial_similarity):
    """Top ``top_k`` (id, score) pairs, ties broken by lower id.

    ``db`` is a mapping id -> SpatialBowVector or an object with such an
    ``index`` attribute. With a previous match only ids within
    ``window // 2`` of it are scored.
    """
    index = getattr(db, "index", db)
    ids = sorted(index)
    if previous is not None:
        half = window // 2
        ids = [i for i in ids if previous - half <= i <= previous + half]
    scored = [(i, score(query, index[i])) for i in ids]
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:top_k]
