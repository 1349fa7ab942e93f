"""Dense Gauss-Newton over a factor graph, Huber weighting and Schur marginalization.

Values live in a plain ``dict`` keyed by variable id. A value is either a
Lie-group element (anything with ``retract``/``local``/``dim``, i.e.
:class:`~relocvo.geometry.SE3` and :class:`~relocvo.geometry.Sim3`) or a 1-D
numpy array for Euclidean blocks.

Energies are ``sum r^T Lambda r`` (no factor 1/2); ``H = sum J^T w Lambda J``
and ``b = -sum J^T w Lambda r``, so a Gauss-Newton step solves ``H dx = b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DegenerateMarginalizationError, RankDeficiencyError
from .geometry import relpose_residual_jacobian, right_jacobian_inv

EIGEN_CLAMP = 1e-10


# ---------------------------------------------------------------------------
# value helpers
# ---------------------------------------------------------------------------


def value_dim(v):
    return v.dim if hasattr(v, "retract") else np.size(v)


def retract(v, delta):
    if hasattr(v, "retract"):
        return v.retract(delta)
    return np.asarray(v, dtype=float) + delta


def local(v0, v):
    if hasattr(v0, "local"):
        return v0.local(v)
    return np.asarray(v, dtype=float) - v0


def local_jacobian(delta, is_group):
    """d local(x0, x Exp(e)) / de evaluated at e = 0."""
    if is_group:
        return right_jacobian_inv(delta)
    return np.eye(delta.size)


# ---------------------------------------------------------------------------
# robust weighting
# ---------------------------------------------------------------------------


def huber_weight(norm, threshold):
    """IRLS weight of the Huber kernel: 1 inside the threshold, ``threshold / norm`` outside."""
    if threshold <= 0:
        raise ValueError("Huber threshold must be positive")
    norm = np.abs(norm)
    return np.where(norm <= threshold, 1.0, threshold / np.maximum(norm, threshold))


def huber_cost(sq_norm, threshold):
    """Huber cost of a squared whitened norm; equals ``sq_norm`` inside the threshold."""
    s = np.sqrt(sq_norm)
    return np.where(s <= threshold, sq_norm, 2.0 * threshold * s - threshold * threshold)


# ---------------------------------------------------------------------------
# factors
# ---------------------------------------------------------------------------


@dataclass
class VariableBlock:
    id: object
    dim: int
    fixed: bool = False


class Factor:
    """Residual ``r(x_keys)`` with information matrix and optional Huber kernel.

    Subclasses implement :meth:`evaluate`, returning the residual and one
    Jacobian per key (``r.size x dim(key)``). :meth:`error` may be overridden
    to skip Jacobian computation during line search.
    """

    name = "factor"

    def __init__(self, keys, information=None, huber=None):
        self.keys = tuple(keys)
        self.information = None if information is None else np.atleast_2d(np.asarray(information, dtype=float))
        self.huber = huber

    def evaluate(self, values):
        raise NotImplementedError

    def error(self, values):
        return self.evaluate(values)[0]

    def _whitened_sq(self, r):
        if self.information is None:
            return float(r @ r)
        return float(r @ self.information @ r)

    def energy(self, values):
        sq = self._whitened_sq(self.error(values))
        if self.huber is None:
            return sq
        return float(huber_cost(sq, self.huber))

    def weight(self, r):
        if self.huber is None:
            return 1.0
        return float(huber_weight(math.sqrt(self._whitened_sq(r)), self.huber))


class LinearFactor(Factor):
    """``r = sum_k A_k x_k - y`` on Euclidean blocks."""

    name = "linear"

    def __init__(self, keys, A, y, information=None, huber=None):
        super().__init__(keys, information, huber)
        self.A = [np.atleast_2d(np.asarray(a, dtype=float)) for a in A]
        self.y = np.atleast_1d(np.asarray(y, dtype=float))

    def evaluate(self, values):
        r = -self.y.copy()
        for k, A in zip(self.keys, self.A):
            r += A @ np.atleast_1d(values[k])
        return r, list(self.A)


class FunctionFactor(Factor):
    """Wraps ``fn(*values) -> (r, [J...])``."""

    name = "function"

    def __init__(self, keys, fn, information=None, huber=None):
        super().__init__(keys, information, huber)
        self.fn = fn

    def evaluate(self, values):
        r, Js = self.fn(*(values[k] for k in self.keys))
        return np.atleast_1d(np.asarray(r, dtype=float)), [np.atleast_2d(J) for J in Js]


class PriorFactor(Factor):
    """Unary prior ``local(prior, x)``."""

    name = "prior"

    def __init__(self, key, prior, information=None):
        super().__init__((key,), information)
        self.prior = prior
        self._group = hasattr(prior, "retract")

    def evaluate(self, values):
        d = local(self.prior, values[self.keys[0]])
        return d, [local_jacobian(d, self._group)]

    def error(self, values):
        return local(self.prior, values[self.keys[0]])


class RelativePoseFactor(Factor):
    """``Log(T_prior T_j T_i^-1)``; ``T_prior`` estimates ``T_i T_j^-1`` (world-to-camera poses)."""

    name = "relpose"

    def __init__(self, key_i, key_j, T_prior, information=None):
        super().__init__((key_i, key_j), information)
        self.T_prior = T_prior

    def evaluate(self, values):
        r, Ji, Jj = relpose_residual_jacobian(self.T_prior, values[self.keys[0]], values[self.keys[1]])
        return r, [Ji, Jj]

    def error(self, values):
        Ti, Tj = values[self.keys[0]], values[self.keys[1]]
        return (self.T_prior @ Tj @ Ti.inverse()).log()


# ---------------------------------------------------------------------------
# linear system
# ---------------------------------------------------------------------------


@dataclass
class LinearSystem:
    H: np.ndarray
    b: np.ndarray
    index: dict  # id -> (offset, dim)

    @property
    def dim(self):
        return self.b.size

    def slice(self, key):
        o, d = self.index[key]
        return slice(o, o + d)

    def keys(self):
        return list(self.index)


def make_index(blocks):
    index, off = {}, 0
    for blk in blocks:
        if blk.fixed:
            continue
        if blk.id in index:
            raise ConfigurationError(f"duplicate variable id {blk.id!r}")
        index[blk.id] = (off, blk.dim)
        off += blk.dim
    return index, off


def blocks_for(values, fixed=()):
    fixed = set(fixed)
    return [VariableBlock(k, value_dim(v), k in fixed) for k, v in values.items()]


def linearize(factors, values, blocks):
    """Assemble the Gauss-Newton normal equations over the free blocks."""
    index, n = make_index(blocks)
    H = np.zeros((n, n))
    b = np.zeros(n)
    for f in factors:
        for k in f.keys:
            if k not in values:
                raise ConfigurationError(f"factor {f.name} references missing variable {k!r}")
        r, Js = f.evaluate(values)
        w = f.weight(r)
        L = f.information
        Lr = r if L is None else L @ r
        free = [(slice(index[k][0], index[k][0] + index[k][1]), J) for k, J in zip(f.keys, Js) if k in index]
        for sa, Ja in free:
            b[sa] -= w * (Ja.T @ Lr)
            JaL = Ja.T if L is None else Ja.T @ L
            for sb, Jb in free:
                H[sa, sb] += w * (JaL @ Jb)
    return LinearSystem(0.5 * (H + H.T), b, index)


def total_energy(factors, values):
    return float(sum(f.energy(values) for f in factors))


def solve_system(system, blocks_hint=None):
    """Solve ``H dx = b`` by Cholesky; raise :class:`RankDeficiencyError` naming null blocks."""
    if system.dim == 0:
        return np.zeros(0)
    H = system.H
    scale = max(float(np.abs(np.diag(H)).max()), 1e-300)
    try:
        c, low = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        piv = np.diag(c) ** 2
        if piv.min() > 1e-13 * scale:
            return scipy.linalg.cho_solve((c, low), system.b, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(H)
    null = V[:, w < 1e-10 * scale]
    bad = []
    for k, (o, d) in system.index.items():
        if np.abs(null[o : o + d]).max(initial=0.0) > 1e-6:
            bad.append(k)
    raise RankDeficiencyError(f"normal equations are rank deficient; unconstrained blocks: {bad}", bad)


@dataclass
class SolveResult:
    values: dict
    energy: float
    iterations: int
    converged: bool
    energies: list = field(default_factory=list)


def apply_step(values, system, delta):
    out = dict(values)
    for k, (o, d) in system.index.items():
        out[k] = retract(values[k], delta[o : o + d])
    return out


def gauss_newton_solve(factors, values, blocks=None, max_iterations=50, step_tolerance=1e-8, max_halvings=8):
    """Safeguarded Gauss-Newton.

    A step that increases the energy is halved up to ``max_halvings`` times;
    if none of the shortened steps helps, iteration stops at the current
    (best) estimate.
    """
    if blocks is None:
        blocks = blocks_for(values)
    values = dict(values)
    energy = total_energy(factors, values)
    history = [energy]
    iterations = 0
    converged = False
    for _ in range(max_iterations):
        system = linearize(factors, values, blocks)
        if system.dim == 0:
            converged = True
            break
        delta = solve_system(system)
        if np.linalg.norm(delta) < step_tolerance:
            converged = True
            break
        accepted = False
        for _h in range(max_halvings + 1):
            trial = apply_step(values, system, delta)
            e_trial = total_energy(factors, trial)
            if e_trial <= energy:
                accepted = True
                break
            delta = 0.5 * delta
        if not accepted:
            converged = True
            break
        values, energy = trial, e_trial
        history.append(energy)
        iterations += 1
        if np.linalg.norm(delta) < step_tolerance:
            converged = True
            break
    return SolveResult(values, energy, iterations, converged, history)


# ---------------------------------------------------------------------------
# marginalization
# ---------------------------------------------------------------------------


def _clamped_eigh(H, clamp=EIGEN_CLAMP):
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.where(w < clamp, 0.0, w)
    return w, V


def _pinv_sym(H, clamp=EIGEN_CLAMP):
    w, V = _clamped_eigh(H, clamp)
    inv = np.where(w > 0.0, 1.0 / np.where(w > 0.0, w, 1.0), 0.0)
    return (V * inv) @ V.T


@dataclass
class MarginalPrior:
    """Gaussian prior ``dx^T H dx - 2 b^T dx`` left behind by a Schur complement.

    ``dx`` stacks ``local(x0[k], x[k])`` over ``keys``.
    """

    keys: list
    dims: list
    H: np.ndarray
    b: np.ndarray
    x0: dict = field(default_factory=dict)

    def factor(self):
        return MarginalFactor(self)

    def restricted(self, drop):
        """Condition on dropped blocks sitting at their linearization point."""
        keep = [i for i, k in enumerate(self.keys) if k not in drop]
        offs = np.cumsum([0] + self.dims)
        idx = np.concatenate([np.arange(offs[i], offs[i + 1]) for i in keep]) if keep else np.zeros(0, int)
        return MarginalPrior(
            [self.keys[i] for i in keep],
            [self.dims[i] for i in keep],
            self.H[np.ix_(idx, idx)],
            self.b[idx],
            {self.keys[i]: self.x0[self.keys[i]] for i in keep if self.keys[i] in self.x0},
        )


class MarginalFactor(Factor):
    """Square-root form of a :class:`MarginalPrior`: ``r = S dx - c`` with ``S^T S = H``."""

    name = "marginal"

    def __init__(self, prior):
        super().__init__(prior.keys)
        self.prior = prior
        w, V = _clamped_eigh(prior.H)
        keep = w > 0.0
        sq = np.sqrt(w[keep])
        self.S = sq[:, None] * V[:, keep].T
        self.c = (V[:, keep].T @ prior.b) / sq if keep.any() else np.zeros(0)
        self._offs = np.cumsum([0] + list(prior.dims))

    def _deltas(self, values):
        return [local(self.prior.x0[k], values[k]) for k in self.keys]

    def error(self, values):
        if self.S.shape[0] == 0:
            return np.zeros(0)
        return self.S @ np.concatenate(self._deltas(values)) - self.c

    def evaluate(self, values):
        deltas = self._deltas(values)
        r = self.S @ np.concatenate(deltas) - self.c if self.S.shape[0] else np.zeros(0)
        Js = []
        for i, (k, d) in enumerate(zip(self.keys, deltas)):
            cols = self.S[:, self._offs[i] : self._offs[i + 1]]
            Js.append(cols @ local_jacobian(d, hasattr(self.prior.x0[k], "retract")))
        return r, Js


def schur_marginalize(system, marginal_ids, values=None, clamp=EIGEN_CLAMP):
    """Schur-complement ``marginal_ids`` out of ``system``.

    ``H' = H_rr - H_rm H_mm^-1 H_mr`` and ``b' = b_r - H_rm H_mm^-1 b_m``;
    eigenvalues of ``H'`` below ``clamp`` are set to zero.
    """
    marginal_ids = set(marginal_ids)
    missing = marginal_ids - set(system.index)
    if missing:
        raise ConfigurationError(f"cannot marginalize unknown blocks {sorted(map(str, missing))}")
    retained = [k for k in system.index if k not in marginal_ids]
    if not retained:
        raise DegenerateMarginalizationError("marginalization would leave no retained variables")
    r_idx = np.concatenate([np.arange(*_range(system, k)) for k in retained])
    m_list = [k for k in system.index if k in marginal_ids]
    m_idx = np.concatenate([np.arange(*_range(system, k)) for k in m_list]) if m_list else np.zeros(0, int)
    H, b = system.H, system.b
    Hrr = H[np.ix_(r_idx, r_idx)]
    br = b[r_idx]
    if m_idx.size:
        Hrm = H[np.ix_(r_idx, m_idx)]
        Hmm_inv = _pinv_sym(H[np.ix_(m_idx, m_idx)], clamp)
        K = Hrm @ Hmm_inv
        Hr = Hrr - K @ Hrm.T
        br = br - K @ b[m_idx]
    else:
        Hr = Hrr
    w, V = _clamped_eigh(Hr, clamp)
    Hr = (V * w) @ V.T
    x0 = {} if values is None else {k: values[k] for k in retained}
    return MarginalPrior(retained, [system.index[k][1] for k in retained], 0.5 * (Hr + Hr.T), br, x0)


def _range(system, k):
    o, d = system.index[k]
    return o, o + d


def dump_system(stream, system, factors=(), values=None):
    """Debug dump: one record per line (``H i j v``, ``b i v``, ``E name keys energy``)."""
    n = system.dim
    for i in range(n):
        for j in range(n):
            if system.H[i, j] != 0.0:
                stream.write(f"H {i} {j} {system.H[i, j]:.17g}\n")
    for i in range(n):
        stream.write(f"b {i} {system.b[i]:.17g}\n")
    if values is not None:
        for f in factors:
            keys = ",".join(str(k) for k in f.keys)
            stream.write(f"E {f.name} {keys} {f.energy(values):.17g}\n")
