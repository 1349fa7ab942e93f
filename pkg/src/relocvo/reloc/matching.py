"""Ratio-test descriptor matching with mutual-best filtering."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .features import distance_matrix

RATIO = 0.85


def match_features(query, reference, ratio=RATIO):
    """Return an (M, 2) int array of (query index, reference index) pairs.

    A query descriptor is kept when ``d1 <= ratio * d2`` for its two nearest
    reference descriptors and it is also the nearest query descriptor of its
    best reference (checked over all queries, so the result only grows with
    ``ratio``). ``d2 == 0`` is ambiguous and rejected; fewer than two
    reference descriptors reject everything.
    """
    if query.kind != reference.kind:
        raise ConfigurationError(f"cannot match {query.kind} against {reference.kind} descriptors")
    if len(reference) < 2 or len(query) == 0:
        return np.zeros((0, 2), dtype=int)
    D = distance_matrix(query.descriptors, reference.descriptors, query.kind)
    order = np.argsort(D, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(D))
    d1 = D[rows, order[:, 0]]
    d2 = D[rows, order[:, 1]]
    best = order[:, 0]
    passed = (d2 > 0) & (d1 <= ratio * d2)
    back = np.argmin(D, axis=0)  # best query per reference
    mutual = back[best] == rows
    keep = np.flatnonzero(passed & mutual)
    return np.stack([keep, best[keep]], axis=1)
