"""Sliding window of keyframes: relocalization priors, photometric BA, marginalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, DegenerateMarginalizationError
from ..geometry import SE3
from ..solver import (
    LinearSystem,
    MarginalFactor,
    RelativePoseFactor,
    VariableBlock,
    linearize,
    schur_marginalize,
    solve_system,
)
from .frames import ACTIVE, DROPPED, MARGINALIZED
from .photometric import HUBER, huber_energy, huber_weights, inside, warp_residuals


def default_information(value=1e2):
    return np.eye(6) * value


@dataclass
class RelativePrior:
    """Relocalization estimate ``T = T_hat_i T_hat_j^-1`` of the pose of camera ``j`` in camera ``i``."""

    i: int
    j: int
    T: SE3
    information: np.ndarray = field(default_factory=default_information)

    def __post_init__(self):
        if self.i == self.j:
            raise ConfigurationError("a relative prior needs two distinct keyframes")
        info = np.asarray(self.information, float)
        if info.shape != (6, 6) or np.any(info != np.diag(np.diag(info))) or np.any(np.diag(info) < 0):
            raise ConfigurationError("prior information must be a non-negative 6x6 diagonal")
        self.information = info

    def factor(self, w=1.0):
        return RelativePoseFactor(self.i, self.j, self.T, w * self.information)

    def error(self, poses):
        return (self.T @ poses[self.j] @ poses[self.i].inverse()).log()

    def energy(self, poses):
        r = self.error(poses)
        return float(r @ self.information @ r)


@dataclass
class Window:
    capacity: int = 7
    w: float = 1e3
    information: np.ndarray = field(default_factory=default_information)
    use_priors: bool = True
    max_priors: int = 2
    keyframes: list = field(default_factory=list)
    marginal: object = None  # MarginalPrior over retained keyframes

    def __len__(self):
        return len(self.keyframes)

    def ids(self):
        return [kf.id for kf in self.keyframes]

    def get(self, kf_id):
        for kf in self.keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(kf_id)

    def poses(self):
        return {kf.id: kf.pose for kf in self.keyframes}

    def full(self):
        return len(self.keyframes) >= self.capacity

    def add(self, kf):
        if self.full():
            raise ConfigurationError(f"window already holds {self.capacity} keyframes")
        self.keyframes.append(kf)

    def priors(self):
        if not self.use_priors:
            return []
        out = []
        for kf in self.keyframes:
            out += select_reloc_priors(self, kf.id, self.max_priors)
        return out


def select_reloc_priors(window, i, max_priors=2):
    """Up to ``max_priors`` priors from keyframe ``i`` to earlier relocalized keyframes, latest first."""
    kf_i = window.get(i)
    if kf_i.reloc is None:
        return []
    partners = sorted((kf for kf in window.keyframes if kf.id < i and kf.reloc is not None), key=lambda k: -k.id)
    return [RelativePrior(i, kf.id, kf_i.reloc.pose @ kf.reloc.pose.inverse(), window.information) for kf in partners[:max_priors]]


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass
class Observations:
    host: np.ndarray  # window index of the host keyframe
    target: np.ndarray  # window index of the target keyframe
    point: np.ndarray  # point index inside the host
    rays: np.ndarray  # (n, 8, 3)
    values: np.ndarray  # (n, 8) host intensities
    mask: np.ndarray  # (n, 8) pattern pixel valid in host
    depth_col: np.ndarray  # column of the inverse-depth variable, -1 when held fixed

    def __len__(self):
        return len(self.host)

    def subset(self, sel):
        return Observations(*(getattr(self, f)[sel] for f in ("host", "target", "point", "rays", "values", "mask", "depth_col")))


def collect_observations(keyframes, hosts=None, margin=2.0):
    """Host/target pairs whose pattern centre currently lands inside the target image."""
    parts = []
    for hi, h in enumerate(keyframes):
        if hosts is not None and h.id not in hosts:
            continue
        idx = np.flatnonzero(h.active())
        if not len(idx):
            continue
        rays, vals, ok = h.level(0)
        for ti, t in enumerate(keyframes):
            if ti == hi:
                continue
            img = t.frame.pyramid[0]
            R_th = t.pose.R @ h.pose.R.T
            Y = rays[idx, 4] @ R_th.T + h.idepth[idx, None] * (t.pose.t - R_th @ h.pose.t)
            front = Y[:, 2] > 1e-9
            uv = Y[:, :2] / np.where(front, Y[:, 2], 1.0)[:, None] * [h.camera.fx, h.camera.fy] + [h.camera.cx, h.camera.cy]
            sel = idx[front & inside(img.shape, uv, margin)]
            if len(sel):
                parts.append((hi, ti, sel, rays[sel], vals[sel], ok[sel]))
    if not parts:
        e = np.zeros(0, int)
        return Observations(e, e, e, np.zeros((0, 8, 3)), np.zeros((0, 8)), np.zeros((0, 8), bool), e)
    host = np.concatenate([np.full(len(p[2]), p[0]) for p in parts])
    target = np.concatenate([np.full(len(p[2]), p[1]) for p in parts])
    point = np.concatenate([p[2] for p in parts])
    return Observations(host, target, point, np.concatenate([p[3] for p in parts]), np.concatenate([p[4] for p in parts]),
                        np.concatenate([p[5] for p in parts]), np.full(len(host), -1))


def assign_depth_columns(keyframes, obs):
    """Give each non-fixed observed point one inverse-depth column; returns (host, point) per column."""
    free = np.array([not keyframes[h].fixed_depth for h in obs.host], bool) if len(obs) else np.zeros(0, bool)
    key = obs.host.astype(np.int64) * 1_000_000 + obs.point
    uniq, inv = np.unique(key[free], return_inverse=True)
    obs.depth_col = np.full(len(obs), -1)
    obs.depth_col[free] = inv
    return np.stack([uniq // 1_000_000, uniq % 1_000_000], 1).astype(int)


# ---------------------------------------------------------------------------
# photometric energy and normal equations
# ---------------------------------------------------------------------------


def _stack(keyframes):
    Rs = np.stack([kf.pose.R for kf in keyframes])
    ts = np.stack([kf.pose.t for kf in keyframes])
    return Rs, ts


def _residuals(keyframes, obs, Rs, ts, depths, jacobians):
    images = np.stack([kf.frame.pyramid[0] for kf in keyframes])
    cam = keyframes[0].camera
    return warp_residuals(obs.values, obs.rays, depths, (Rs[obs.host], ts[obs.host]), (Rs[obs.target], ts[obs.target]),
                          images, cam, index=obs.target, jacobians=jacobians)


def _obs_depths(keyframes, obs, depth_vars=None):
    if not len(obs):
        return np.zeros(0)
    offs = np.cumsum([0] + [len(kf) for kf in keyframes])
    d = np.concatenate([kf.idepth for kf in keyframes])[offs[obs.host] + obs.point]
    if depth_vars is not None:
        free = obs.depth_col >= 0
        d[free] = depth_vars[obs.depth_col[free]]
    return d


def photometric_energy(keyframes, obs, Rs=None, ts=None, depths=None, huber=HUBER):
    if not len(obs):
        return 0.0
    if Rs is None:
        Rs, ts = _stack(keyframes)
    if depths is None:
        depths = _obs_depths(keyframes, obs)
    if np.any(depths <= 0):
        return np.inf
    r, front, _ = _residuals(keyframes, obs, Rs, ts, depths, False)
    if np.any(~front & obs.mask):
        return np.inf
    return float((huber_energy(r, huber) * obs.mask).sum())


def photometric_system(keyframes, obs, n_depth, depths=None, huber=HUBER, Rs=None, ts=None):
    """Dense pose blocks ``(K, K, 6, 6)``/``(K, 6)`` plus pose-depth coupling and depth diagonal.

    Linearized at the stacked poses ``Rs``/``ts`` (default: the keyframes' own).
    """
    K = len(keyframes)
    HB = np.zeros((K, K, 6, 6))
    bB = np.zeros((K, 6))
    HDP = np.zeros((n_depth, K * 6))
    Hdd = np.zeros(n_depth)
    bd = np.zeros(n_depth)
    if not len(obs):
        return HB, bB, HDP, Hdd, bd
    if Rs is None:
        Rs, ts = _stack(keyframes)
    if depths is None:
        depths = _obs_depths(keyframes, obs)
    r, front, _, J, Jr = _residuals(keyframes, obs, Rs, ts, depths, True)
    W = huber_weights(r, huber) * obs.mask
    JW = J * W[..., None]
    JWt = np.swapaxes(JW, 1, 2)
    A = JWt @ J
    g = (JWt @ r[..., None])[..., 0]
    h, t = obs.host, obs.target
    pair = h * K + t
    # accumulate per (host, target) pair
    HP = np.zeros((K * K, 6, 6))
    np.add.at(HP, pair, A)
    HP = HP.reshape(K, K, 6, 6)
    for a in range(K):
        for b in range(K):
            blk = HP[a, b]
            if a == b or not blk.any():
                continue
            HB[b, b] += blk
            HB[a, a] += blk
            HB[a, b] -= blk
            HB[b, a] -= blk
    np.add.at(bB, t, -g)
    np.add.at(bB, h, g)
    col = obs.depth_col
    free = col >= 0
    if free.any():
        c = (np.swapaxes(JW[free], 1, 2) @ Jr[free][..., None])[..., 0]
        ar = np.arange(6)
        np.add.at(HDP, (col[free, None], t[free, None] * 6 + ar), c)
        np.add.at(HDP, (col[free, None], h[free, None] * 6 + ar), -c)
        np.add.at(Hdd, col[free], (W[free] * Jr[free] ** 2).sum(1))
        np.add.at(bd, col[free], -(W[free] * Jr[free] * r[free]).sum(1))
    return HB, bB, HDP, Hdd, bd


def _blocks_to_dense(HB, bB, keep):
    k = len(keep)
    H = HB[np.ix_(keep, keep)].transpose(0, 2, 1, 3).reshape(6 * k, 6 * k)
    return H, bB[keep].reshape(-1)


def _pose_columns(keep):
    return np.concatenate([np.arange(6 * i, 6 * i + 6) for i in keep]) if len(keep) else np.zeros(0, int)


# ---------------------------------------------------------------------------
# windowed bundle adjustment
# ---------------------------------------------------------------------------


@dataclass
class EnergyTerms:
    photo: float
    pose: float  # unweighted sum of prior energies
    marginal: float
    w: float

    @property
    def total(self):
        return self.photo + self.w * self.pose + self.marginal


@dataclass
class BAResult:
    iterations: int
    converged: bool
    energies: list  # EnergyTerms of the initial and every accepted iterate

    @property
    def final(self):
        return self.energies[-1]


def window_energy(window, obs=None, huber=HUBER):
    kfs = window.keyframes
    obs = collect_observations(kfs) if obs is None else obs
    poses = window.poses()
    photo = photometric_energy(kfs, obs, huber=huber)
    pose = sum(p.energy(poses) for p in window.priors())
    marg = MarginalFactor(window.marginal).energy(poses) if window.marginal is not None else 0.0
    return EnergyTerms(photo, float(pose), float(marg), window.w)


def windowed_ba(window, max_iterations=6, step_tolerance=1e-8, max_halvings=8, huber=HUBER, decrease_tolerance=1e-2):
    """Gauss-Newton on the free poses and inverse depths of the window (oldest pose held fixed)."""
    kfs = window.keyframes
    if len(kfs) < 2:
        raise ConfigurationError("bundle adjustment needs at least two keyframes")
    K = len(kfs)
    obs = collect_observations(kfs)
    cols = assign_depth_columns(kfs, obs)
    m = len(cols)
    depth_vars = np.array([kfs[h].idepth[p] for h, p in cols]) if m else np.zeros(0)
    priors = window.priors()
    factors = [p.factor(window.w) for p in priors]
    if window.marginal is not None:
        factors.append(MarginalFactor(window.marginal))
    blocks = [VariableBlock(kf.id, 6, i == 0) for i, kf in enumerate(kfs)]
    free = list(range(1, K))

    def stacked(poses):
        return np.stack([poses[kf.id].R for kf in kfs]), np.stack([poses[kf.id].t for kf in kfs])

    def energy(poses, dvars):
        photo = photometric_energy(kfs, obs, *stacked(poses), _obs_depths(kfs, obs, dvars), huber)
        pose = sum(p.energy(poses) for p in priors)
        marg = factors[-1].energy(poses) if window.marginal is not None else 0.0
        return EnergyTerms(photo, float(pose), float(marg), window.w)

    poses = window.poses()
    current = energy(poses, depth_vars)
    history = [current]
    iterations, converged = 0, False
    for _ in range(max_iterations):
        HB, bB, HDP, Hdd, bd = photometric_system(kfs, obs, m, _obs_depths(kfs, obs, depth_vars), huber, *stacked(poses))
        H, b = _blocks_to_dense(HB, bB, free)
        index = {kfs[i].id: (6 * n, 6) for n, i in enumerate(free)}
        if factors:
            sys = linearize(factors, poses, blocks)
            for key, (o, d) in sys.index.items():
                for key2, (o2, d2) in sys.index.items():
                    H[index[key][0] : index[key][0] + 6, index[key2][0] : index[key2][0] + 6] += sys.H[o : o + d, o2 : o2 + d2]
                b[index[key][0] : index[key][0] + 6] += sys.b[o : o + d]
        C = HDP[:, _pose_columns(free)]
        live = Hdd > 1e-12
        inv = np.zeros(m)
        inv[live] = 1.0 / Hdd[live]
        Hr = H - (C.T * inv) @ C
        br = b - C.T @ (inv * bd)
        dp = solve_system(LinearSystem(0.5 * (Hr + Hr.T), br, index))
        dd = inv * (bd - C @ dp)
        step = np.concatenate([dp, dd])
        # decrease predicted by the quadratic model (energies carry no 1/2)
        predicted = float(dp @ b + dd @ bd)
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) < step_tolerance or predicted < decrease_tolerance * current.total:
            converged = True
            break
        alpha, accepted = 1.0, None
        for _ in range(max_halvings + 1):
            trial = dict(poses)
            for n, i in enumerate(free):
                trial[kfs[i].id] = poses[kfs[i].id].retract(alpha * dp[6 * n : 6 * n + 6])
            tv = depth_vars + alpha * dd
            e = energy(trial, tv)
            if e.total < current.total:
                accepted = (trial, tv, e)
                break
            alpha *= 0.5
        if accepted is None:
            converged = True
            break
        gain = current.total - accepted[2].total
        poses, depth_vars, current = accepted
        history.append(current)
        iterations += 1
        if alpha * np.linalg.norm(step) < step_tolerance or gain < decrease_tolerance * history[-2].total:
            converged = True
            break
    for kf in kfs:
        kf.pose = poses[kf.id]
    for (h, p), v in zip(cols, depth_vars):
        kfs[h].idepth[p] = v
    return BAResult(iterations, converged, history)


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------


@dataclass
class MarginalizationEvent:
    """Emitted when a keyframe leaves the window; consumed by pose fusion."""

    keyframe: object
    pose: SE3
    reloc: object
    marginalized_points: int = 0
    dropped_points: int = 0


def marginalize_keyframe(window, kf_id, huber=HUBER):
    """Schur-complement keyframe ``kf_id`` and its surviving points into the window's marginal prior."""
    if len(window) <= 1:
        raise DegenerateMarginalizationError("cannot marginalize the only keyframe of the window")
    kfs = window.keyframes
    mi = window.ids().index(kf_id)
    m = kfs[mi]
    obs = collect_observations(kfs, hosts={kf_id})
    counts = np.bincount(obs.point, minlength=len(m)) if len(obs) else np.zeros(len(m), int)
    keep = m.active() & (counts >= 2)
    obs = obs.subset(keep[obs.point]) if len(obs) else obs
    cols = assign_depth_columns(kfs, obs)
    K, n_d = len(kfs), len(cols)
    HB, bB, HDP, Hdd, bd = photometric_system(kfs, obs, n_d, huber=huber)
    H_pp, b_p = _blocks_to_dense(HB, bB, list(range(K)))
    index = {kf.id: (6 * i, 6) for i, kf in enumerate(kfs)}
    poses = window.poses()
    factors = [p.factor(window.w) for p in window.priors() if kf_id in (p.i, p.j)]
    if window.marginal is not None:
        factors.append(MarginalFactor(window.marginal))
    if factors:
        sys = linearize(factors, poses, [VariableBlock(kf.id, 6) for kf in kfs])
        for key, (o, d) in sys.index.items():
            for key2, (o2, d2) in sys.index.items():
                H_pp[index[key][0] : index[key][0] + 6, index[key2][0] : index[key2][0] + 6] += sys.H[o : o + d, o2 : o2 + d2]
            b_p[index[key][0] : index[key][0] + 6] += sys.b[o : o + d]
    n_p = 6 * K
    H = np.zeros((n_p + n_d, n_p + n_d))
    H[:n_p, :n_p] = H_pp
    H[n_p:, :n_p] = HDP
    H[:n_p, n_p:] = HDP.T
    H[n_p + np.arange(n_d), n_p + np.arange(n_d)] = Hdd
    b = np.concatenate([b_p, bd])
    depth_keys = [("depth", int(h), int(p)) for h, p in cols]
    for c, key in enumerate(depth_keys):
        index[key] = (n_p + c, 1)
    prior = schur_marginalize(LinearSystem(H, b, index), [kf_id] + depth_keys, values=poses)
    window.marginal = prior
    active = m.active()
    m.status[active & keep] = MARGINALIZED
    m.status[active & ~keep] = DROPPED
    window.keyframes = [kf for kf in kfs if kf.id != kf_id]
    return MarginalizationEvent(m, m.pose, m.reloc, int((active & keep).sum()), int((active & ~keep).sum()))
