"""Online local Sim(3) pose graph fusing odometry and map relocalization poses.

Each marginalized keyframe ``m`` gets a small graph: ``m`` plus up to
``span - 1`` earlier keyframes that hold a relocalization pose. Odometry
edges tie the nodes together, map edges pull them towards the relocalized
global poses, and the oldest node (already fused) anchors the gauge.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FusionDeferred
from .geometry import SE3, Sim3, pose_to_fields, right_jacobian_inv
from .solver import Factor, VariableBlock, gauss_newton_solve, total_energy


def lift(T):
    """SE(3) -> Sim(3) with unit scale."""
    return T if isinstance(T, Sim3) else Sim3.from_se3(T)


@dataclass
class FusionConfig:
    w: float = 1e2
    max_map_edges: int = 2
    span: int = 10
    scale_information: float = 1e-6
    all_pairs: bool = False
    bootstrap: bool = True
    max_iterations: int = 50
    step_tolerance: float = 1e-8

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("map weight must be positive")
        if not 0 <= self.max_map_edges <= 2:
            raise ValueError("at most two map edges per node")
        if self.span < 2:
            raise ValueError("graph span must be at least 2")

    def map_information(self):
        info = np.eye(7)
        info[6, 6] = self.scale_information
        return info


@dataclass
class FusionNode:
    id: int
    pose: Sim3
    fixed: bool = False


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def residual_vo(T_ij, F_i, F_j):
    """``Log(T_ij F_j F_i^-1)`` and Jacobians w.r.t. ``F_i`` and ``F_j``.

    ``T_ij`` maps camera ``j`` to camera ``i`` (``T_i T_j^-1`` for
    world-to-camera odometry poses), lifted to Sim(3).
    """
    e = (lift(T_ij) @ F_j @ F_i.inverse()).log()
    J_j = right_jacobian_inv(e) @ F_i.adjoint()
    return e, -J_j, J_j


def residual_map(T_hat, M_k, F_i):
    """``Log((T_hat M_k^-1)^-1 F_i M_k^-1)`` and its Jacobian w.r.t. ``F_i``."""
    M = lift(M_k)
    l = ((lift(T_hat) @ M.inverse()).inverse() @ F_i @ M.inverse()).log()
    return l, right_jacobian_inv(l) @ M.adjoint()


class OdometryEdge(Factor):
    name = "odometry"

    def __init__(self, i, j, T_ij, information=None):
        super().__init__((i, j), np.eye(7) if information is None else information)
        self.T_ij = lift(T_ij)
        self._last = (None, None, None)

    def evaluate(self, values):
        F_i = values[self.keys[0]]
        e = self.error(values)
        J_j = right_jacobian_inv(e) @ F_i.adjoint()
        return e, [-J_j, J_j]

    def error(self, values):
        F_i, F_j = values[self.keys[0]], values[self.keys[1]]
        # poses are immutable, so the last residual is reused when the solver
        # linearizes at the values it has just scored
        if self._last[0] is F_i and self._last[1] is F_j:
            return self._last[2]
        e = (self.T_ij @ F_j @ F_i.inverse()).log()
        e.flags.writeable = False
        self._last = (F_i, F_j, e)
        return e


class MapEdge(Factor):
    name = "map"

    def __init__(self, i, map_id, T_hat, M_k, information):
        super().__init__((i,), information)
        self.map_id = map_id
        self.T_hat = lift(T_hat)
        self.M_k = lift(M_k)
        self._pre = (self.T_hat @ self.M_k.inverse()).inverse()
        self._post = self.M_k.inverse()
        self._adjoint = self.M_k.adjoint()
        self._last = (None, None)

    def evaluate(self, values):
        l = self.error(values)
        return l, [right_jacobian_inv(l) @ self._adjoint]

    def error(self, values):
        F_i = values[self.keys[0]]
        if self._last[0] is F_i:
            return self._last[1]
        l = (self._pre @ F_i @ self._post).log()
        l.flags.writeable = False
        self._last = (F_i, l)
        return l


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass
class HistoryEntry:
    odometry: SE3  # world-to-camera in the odometry frame
    reloc: object = None  # RelocResult or None
    fused: Sim3 = None


@dataclass
class FusionGraph:
    nodes: list  # FusionNode, oldest first
    odometry_edges: list
    map_edges: list

    def values(self):
        return {n.id: n.pose for n in self.nodes}

    def blocks(self):
        return [VariableBlock(n.id, 7, n.fixed) for n in self.nodes]

    def factors(self):
        return self.odometry_edges + self.map_edges

    def energy(self, values=None):
        return total_energy(self.factors(), values or self.values())


def relative_odometry(history, i, j):
    """``T_i T_j^-1``: camera ``j`` to camera ``i``."""
    return history[i].odometry @ history[j].odometry.inverse()


def map_edges_for(node_id, reloc, map_poses, config):
    refs = sorted(zip(reloc.reference_ids, reloc.reference_inliers), key=lambda r: -r[1])
    info = config.w * config.map_information()
    return [MapEdge(node_id, k, reloc.pose, map_poses[k], info) for k, _ in refs[: config.max_map_edges]]


def build_local_graph(m, history, map_poses, config=None):
    """Graph for marginalized keyframe ``m``; ``history`` maps id -> HistoryEntry.

    Raises :class:`FusionDeferred` when no earlier keyframe holds a fused pose
    and ``m`` cannot bootstrap.
    """
    cfg = config or FusionConfig()
    earlier = sorted(k for k, h in history.items() if k < m and h.reloc is not None and h.fused is not None)
    earlier = earlier[-(cfg.span - 1):]
    if not earlier:
        raise FusionDeferred(f"keyframe {m}: no fused reference keyframe yet")
    ids = earlier + [m]
    nodes = [FusionNode(ids[0], history[ids[0]].fused, fixed=True)]
    for prev, cur in zip(ids, ids[1:]):
        # F_j := T^j_i F_i
        nodes.append(FusionNode(cur, lift(relative_odometry(history, cur, prev)) @ nodes[-1].pose))
    pairs = list(zip(ids, ids[1:]))
    if cfg.all_pairs:
        pairs = [(a, b) for n, a in enumerate(ids) for b in ids[n + 1:]]
    odo = [OdometryEdge(a, b, relative_odometry(history, a, b)) for a, b in pairs]
    maps = []
    for node in nodes[1:]:
        reloc = history[node.id].reloc
        if reloc is not None:
            maps += map_edges_for(node.id, reloc, map_poses, cfg)
    return FusionGraph(nodes, odo, maps)


@dataclass
class FusionResult:
    poses: dict
    initial_energy: float
    energy: float
    iterations: int


def optimize_fusion(graph, config=None):
    cfg = config or FusionConfig()
    values = graph.values()
    e0 = graph.energy(values)
    res = gauss_newton_solve(graph.factors(), values, graph.blocks(), cfg.max_iterations, cfg.step_tolerance)
    poses = {n.id: (n.pose if n.fixed else res.values[n.id]) for n in graph.nodes}
    return FusionResult(poses, e0, res.energy, res.iterations)


# ---------------------------------------------------------------------------
# online driver
# ---------------------------------------------------------------------------


@dataclass
class FusionRecord:
    keyframe: int
    nodes: int
    map_edges: int
    initial_energy: float
    final_energy: float
    iterations: int


@dataclass
class OnlineFusion:
    """Consumes marginalization events in order and emits fused poses.

    Before any keyframe is relocalized, keyframes are held back. The first
    relocalized keyframe seeds ``F = lift(T_hat)``; held-back keyframes are
    then placed by chaining odometry from it.
    """

    map_poses: dict
    config: FusionConfig = field(default_factory=FusionConfig)
    history: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)
    deferred: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def process(self, kf_id, odometry_pose, reloc=None):
        """Returns the ids fused by this event (possibly several after a bootstrap)."""
        self.history[kf_id] = HistoryEntry(odometry_pose, reloc)
        try:
            graph = build_local_graph(kf_id, self.history, self.map_poses, self.config)
        except FusionDeferred:
            if not self.fused and self.config.bootstrap and reloc is not None:
                return self._bootstrap(kf_id, reloc)
            self.deferred.append(kf_id)
            return []
        res = optimize_fusion(graph, self.config)
        self._set(kf_id, res.poses[kf_id])
        self.log.append(FusionRecord(kf_id, len(graph.nodes), len(graph.map_edges), res.initial_energy, res.energy, res.iterations))
        return [kf_id]

    def _set(self, kf_id, F):
        self.history[kf_id].fused = F
        self.fused[kf_id] = F

    def _bootstrap(self, kf_id, reloc):
        F = lift(reloc.pose)
        self._set(kf_id, F)
        self.log.append(FusionRecord(kf_id, 1, 0, 0.0, 0.0, 0))
        out = []
        for d in self.deferred:
            self._set(d, lift(relative_odometry(self.history, d, kf_id)) @ F)
            out.append(d)
        self.deferred = []
        return out + [kf_id]


def write_fused_tum(path, fused, timestamps=None):
    """Camera-to-map poses with an appended scale column."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw s\n")
        for k in sorted(fused):
            ts = k if timestamps is None else timestamps[k]
            fh.write(f"{ts:.6f} {pose_to_fields(fused[k].inverse())}\n")


def write_fusion_log(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["keyframe", "nodes", "map_edges", "initial_energy", "final_energy", "iterations"])
        for r in records:
            w.writerow([r.keyframe, r.nodes, r.map_edges, f"{r.initial_energy:.12g}", f"{r.final_energy:.12g}", r.iterations])
