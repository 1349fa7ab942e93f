"""Trajectory metrics: relative pose error, aligned absolute error, cumulative curves."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError

RPE_INTERVAL = 7


class AlignmentWarning(UserWarning):
    pass


def threshold_grid(lo=1e-3, hi=10.0, per_decade=20):
    """Geometric error thresholds from ``lo`` to ``hi`` (inclusive)."""
    n = int(round(np.log10(hi / lo) * per_decade)) + 1
    return np.geomspace(lo, hi, n)


def _matched(estimate, ground_truth):
    ids = sorted(set(estimate) & set(ground_truth))
    return ids


@dataclass
class RPEResult:
    ids: list  # first keyframe of each pair
    samples: np.ndarray
    interval: int

    @property
    def rmse(self):
        return float(np.sqrt(np.mean(self.samples**2))) if len(self.samples) else float("nan")


def compute_rpe(estimate, ground_truth, interval=RPE_INTERVAL):
    """Translational error of the motion between keyframes ``interval`` apart.

    Both inputs map keyframe id -> world-to-camera pose; keyframes are
    matched by id and paired by their rank among the matched ids. Fewer
    than ``interval + 1`` matches give an empty result.
    """
    ids = _matched(estimate, ground_truth)
    if interval < 1:
        raise ConfigurationError("RPE interval must be positive")
    out = []
    for a, b in zip(ids, ids[interval:]):
        rel_est = estimate[a] @ estimate[b].inverse()
        rel_gt = ground_truth[a] @ ground_truth[b].inverse()
        out.append(np.linalg.norm((rel_gt.inverse() @ rel_est).t))
    return RPEResult(ids[: len(out)], np.array(out), interval)


def umeyama(src, dst, with_scale=True):
    """``(s, R, t)`` minimising ``sum |dst - (s R src + t)|^2``."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = (xs**2).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var) if with_scale and var > 0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def _degenerate(points, tol=1e-9):
    sv = np.linalg.svd(points - points.mean(0), compute_uv=False)
    return sv[0] <= 0 or sv[1] <= tol * sv[0]


@dataclass
class ATEResult:
    ids: list
    errors: np.ndarray
    alignment: str  # alignment actually used
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def rmse(self):
        return float(np.sqrt(np.mean(self.errors**2))) if len(self.errors) else float("nan")


def compute_ate(estimate, ground_truth, alignment="sim3"):
    """Camera-centre error after a least-squares ``sim3``/``se3`` alignment (or ``none``).

    Collinear trajectories cannot fix a Sim(3) alignment; they fall back to
    SE(3) with an :class:`AlignmentWarning`.
    """
    if alignment not in ("sim3", "se3", "none"):
        raise ConfigurationError(f"unknown alignment {alignment!r}")
    ids = _matched(estimate, ground_truth)
    if alignment != "none" and len(ids) < 3:
        raise ConfigurationError(f"alignment needs at least 3 matched keyframes, got {len(ids)}")
    est = np.array([estimate[k].center() for k in ids]).reshape(-1, 3)
    gt = np.array([ground_truth[k].center() for k in ids]).reshape(-1, 3)
    s, R, t = 1.0, np.eye(3), np.zeros(3)
    if alignment == "sim3" and _degenerate(est):
        warnings.warn("degenerate trajectory for a similarity alignment; using a rigid one", AlignmentWarning)
        alignment = "se3"
    if alignment != "none":
        s, R, t = umeyama(est, gt, with_scale=alignment == "sim3")
    aligned = s * est @ R.T + t
    return ATEResult(ids, np.linalg.norm(aligned - gt, axis=1), alignment, s, R, t)


def cumulative_curve(errors, thresholds=None, total=None):
    """Fraction of ``total`` keyframes (default: all errors given) with error <= threshold."""
    thresholds = threshold_grid() if thresholds is None else np.asarray(thresholds, float)
    errors = np.sort(np.asarray(errors, float))
    n = len(errors) if total is None else total
    if n == 0:
        return thresholds, np.zeros(len(thresholds))
    if n < len(errors):
        raise ConfigurationError("total must count at least the keyframes with an error")
    return thresholds, np.searchsorted(errors, thresholds, side="right") / n


@dataclass
class MetricsReport:
    rpe_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rpe_rmse: float = float("nan")
    ate_rmse: float = float("nan")
    curve: tuple = (np.zeros(0), np.zeros(0))  # (thresholds, fractions)
    reloc_success_rate: float = float("nan")
    extra: dict = field(default_factory=dict)  # further named scalars


def _fmt(x):
    return f"{float(x):.12g}"


def emit_report(report, directory, prefix=""):
    """Write ``rpe.csv``, ``metrics.csv`` and ``curve.csv`` into ``directory``; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {name: os.path.join(directory, f"{prefix}{name}.csv") for name in ("rpe", "metrics", "curve")}
    with open(paths["rpe"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rpe"])
        for x in report.rpe_samples:
            w.writerow([_fmt(x)])
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        rows = [("rpe_rmse", report.rpe_rmse), ("ate_rmse", report.ate_rmse), ("reloc_success_rate", report.reloc_success_rate)]
        rows += sorted(report.extra.items())
        for name, value in rows:
            if value is not None and np.isfinite(value):
                w.writerow([name, _fmt(value)])
    with open(paths["curve"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fraction"])
        for th, fr in zip(*report.curve):
            w.writerow([_fmt(th), _fmt(fr)])
    return paths
