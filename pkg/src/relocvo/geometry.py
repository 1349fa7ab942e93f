"""SE(3) / Sim(3) Lie groups, pinhole projection and residual Jacobians.

Conventions used throughout the package:

* Twists are ordered ``(rho, omega)`` for se(3) and ``(rho, omega, sigma)``
  for sim(3), where ``sigma = ln(scale)``.
* Keyframe poses are world-to-camera transforms.
* All Jacobians are taken with respect to a right-multiplicative
  perturbation ``T -> T @ Exp(delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError

_SMALL = 1e-6
# (theta - sin theta) / theta^3 loses precision long before 1e-6
_SMALL_CUBIC = 1e-2


def hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def hat_batch(V):
    V = np.asarray(V, dtype=float)
    H = np.zeros(V.shape[:-1] + (3, 3))
    H[..., 0, 1] = -V[..., 2]
    H[..., 0, 2] = V[..., 1]
    H[..., 1, 0] = V[..., 2]
    H[..., 1, 2] = -V[..., 0]
    H[..., 2, 0] = -V[..., 1]
    H[..., 2, 1] = V[..., 0]
    return H


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = hat(omega)
    if theta < _SMALL:
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
    else:
        A = math.sin(theta) / theta
        h = math.sin(0.5 * theta)
        B = 2.0 * h * h / theta2
    return np.eye(3) + A * W + B * (W @ W)


def rotation_to_quaternion(R):
    """Shepperd's method. Returns ``(x, y, z, w)`` with ``w >= 0``.

    At exactly 180 degrees ``w == 0`` and the sign is chosen so the
    component along the dominant axis of ``R + R^T`` is positive.
    """
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    k = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if k == 0:
        w = 0.5 * math.sqrt(max(1.0 + tr, 0.0))
        f = 0.25 / w
        q = np.array([(R[2, 1] - R[1, 2]) * f, (R[0, 2] - R[2, 0]) * f, (R[1, 0] - R[0, 1]) * f, w])
    elif k == 1:
        x = 0.5 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        f = 0.25 / x
        q = np.array([x, (R[0, 1] + R[1, 0]) * f, (R[0, 2] + R[2, 0]) * f, (R[2, 1] - R[1, 2]) * f])
    elif k == 2:
        y = 0.5 * math.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        f = 0.25 / y
        q = np.array([(R[0, 1] + R[1, 0]) * f, y, (R[1, 2] + R[2, 1]) * f, (R[0, 2] - R[2, 0]) * f])
    else:
        z = 0.5 * math.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        f = 0.25 / z
        q = np.array([(R[0, 2] + R[2, 0]) * f, (R[1, 2] + R[2, 1]) * f, z, (R[1, 0] - R[0, 1]) * f])
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q):
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def so3_log(R):
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c > -0.5:
        # away from a half turn the antisymmetric part carries the axis accurately
        s = float(np.linalg.norm(v))
        if s < 1e-8:
            return v * (1.0 + s * s / 6.0)
        return v * (math.atan2(s, c) / s)
    q = rotation_to_quaternion(R)
    v, w = q[:3], q[3]
    n = float(np.linalg.norm(v))
    if n < 1e-8:
        # 2 atan2(n, w) / n for tiny n
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    return v * (2.0 * math.atan2(n, w) / n)


def _se3_V(omega):
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = hat(omega)
    if theta < _SMALL:
        B = 0.5 - theta2 / 24.0
    else:
        h = math.sin(0.5 * theta)
        B = 2.0 * h * h / theta2
    if theta < _SMALL_CUBIC:
        C = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        C = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + B * W + C * (W @ W)


def _se3_V_inv(omega):
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    W = hat(omega)
    if theta < _SMALL:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        half = 0.5 * theta
        c = (1.0 - half / math.tan(half)) / theta2
    return np.eye(3) - 0.5 * W + c * (W @ W)


# ---------------------------------------------------------------------------
# Sim(3) coefficient functions
# ---------------------------------------------------------------------------


_MOMENT_TERMS = 30
_MOMENT_DENOM = 1.0 / (np.arange(7)[:, None] + np.arange(_MOMENT_TERMS)[None, :] + 1.0)
_INV_FACTORIAL = 1.0 / np.cumprod(np.r_[1.0, np.arange(1.0, _MOMENT_TERMS)])


def _exp_moments(sigma):
    """Integrals of ``exp(sigma * tau) * tau**n`` over ``[0, 1]`` for ``n = 0..6``."""
    if abs(sigma) <= 1.0:
        # 30 series terms reach round-off for |sigma| <= 1
        return _MOMENT_DENOM @ (sigma ** np.arange(_MOMENT_TERMS) * _INV_FACTORIAL)
    es = math.exp(sigma)
    out = np.empty(7)
    out[0] = (es - 1.0) / sigma
    for m in range(1, 7):
        out[m] = (es - m * out[m - 1]) / sigma
    return out


def _exp_moment(n, sigma):
    return float(_exp_moments(sigma)[n])


def _cross(a, b):
    # np.cross pays for general axis handling; this is the 3-vector case only
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _sim3_W_coefficients(omega, sigma):
    """``(p, q, r)`` with ``W = p I + q hat(omega) + r omega omega^T``."""
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    if theta < _SMALL_CUBIC:
        m = _exp_moments(sigma)
        a0 = m[0]
        B = m[1] - theta2 / 6.0 * m[3] + theta2 * theta2 / 120.0 * m[5]
        C = 0.5 * m[2] - theta2 / 24.0 * m[4] + theta2 * theta2 / 720.0 * m[6]
    else:
        a0 = _exp_moment(0, sigma)
        es = math.exp(sigma)
        st, ct = math.sin(theta), math.cos(theta)
        den = sigma * sigma + theta2
        int_sin = (es * (sigma * st - theta * ct) + theta) / den
        int_cos = (es * (sigma * ct + theta * st) - sigma) / den
        B = int_sin / theta
        C = (a0 - int_cos) / theta2
    # hat(omega)^2 = omega omega^T - theta^2 I
    return a0 - C * theta2, B, C, theta2


def _sim3_W(omega, sigma):
    p, q, r, _ = _sim3_W_coefficients(omega, sigma)
    return p * np.eye(3) + q * hat(omega) + r * np.outer(omega, omega)


def _sim3_W_apply(omega, sigma, v):
    p, q, r, _ = _sim3_W_coefficients(omega, sigma)
    return p * v + q * _cross(omega, v) + r * omega * float(omega @ v)


def _sim3_W_solve(omega, sigma, v):
    """``W^-1 v``; the inverse lies in the same three-term family."""
    p, q, r, theta2 = _sim3_W_coefficients(omega, sigma)
    den = p * p + q * q * theta2
    x, y = p / den, -q / den
    z = -(q * y + r * x) / (p + r * theta2)
    return x * v + y * _cross(omega, v) + z * omega * float(omega @ v)


# ---------------------------------------------------------------------------
# Groups
# ---------------------------------------------------------------------------


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


class SE3:
    """Rigid transform ``x -> R x + t``."""

    __slots__ = ("R", "t")
    dim = 6

    def __init__(self, R=None, t=None):
        self.R = _frozen(np.eye(3) if R is None else R)
        self.t = _frozen(np.zeros(3) if t is None else t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_quaternion(cls, q, t):
        return cls(quaternion_to_rotation(q), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        rho, omega = xi[:3], xi[3:6]
        return cls(so3_exp(omega), _se3_V(omega) @ rho)

    def log(self):
        omega = so3_log(self.R)
        return np.concatenate([_se3_V_inv(omega) @ self.t, omega])

    @property
    def quaternion(self):
        return rotation_to_quaternion(self.R)

    @property
    def scale(self):
        return 1.0

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        Rt = self.R.T
        return SE3(Rt, -Rt @ self.t)

    def __matmul__(self, other):
        if isinstance(other, Sim3):
            return Sim3.from_se3(self) @ other
        return SE3(self.R @ other.R, self.R @ other.t + self.t)

    def act(self, p):
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def retract(self, delta):
        return self @ SE3.exp(delta)

    def normalized(self):
        """Same pose with the rotation projected back onto SO(3) (removes rounding drift)."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return SE3(R, self.t.copy())

    def local(self, other):
        """Tangent vector ``d`` with ``other = self @ Exp(d)``."""
        return (self.inverse() @ other).log()

    def adjoint(self):
        A = np.zeros((6, 6))
        A[:3, :3] = self.R
        A[:3, 3:] = hat(self.t) @ self.R
        A[3:, 3:] = self.R
        return A

    def center(self):
        """Camera centre for a world-to-camera pose."""
        return -self.R.T @ self.t

    def __repr__(self):
        return f"SE3(t={np.round(self.t, 6).tolist()}, q={np.round(self.quaternion, 6).tolist()})"


class Sim3:
    """Similarity ``x -> s R x + t``."""

    __slots__ = ("R", "t", "s")
    dim = 7

    def __init__(self, R=None, t=None, s=1.0):
        if not s > 0.0:
            raise ValueError(f"Sim3 scale must be positive, got {s}")
        self.R = _frozen(np.eye(3) if R is None else R)
        self.t = _frozen(np.zeros(3) if t is None else t)
        self.s = float(s)

    @classmethod
    def _wrap(cls, R, t, s):
        # freshly computed, validated parts: freeze in place instead of copying
        out = object.__new__(cls)
        R.flags.writeable = False
        t.flags.writeable = False
        out.R, out.t, out.s = R, t, s
        return out

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_se3(cls, T, s=1.0):
        return cls(T.R, T.t, s)

    @classmethod
    def from_quaternion(cls, q, t, s=1.0):
        return cls(quaternion_to_rotation(q), t, s)

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        rho, omega, sigma = xi[:3], xi[3:6], float(xi[6])
        return cls(so3_exp(omega), _sim3_W_apply(omega, sigma, rho), math.exp(sigma))

    def log(self):
        omega = so3_log(self.R)
        sigma = math.log(self.s)
        rho = _sim3_W_solve(omega, sigma, self.t)
        return np.concatenate([rho, omega, [sigma]])

    @property
    def quaternion(self):
        return rotation_to_quaternion(self.R)

    @property
    def scale(self):
        return self.s

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.s * self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        Rt = self.R.T.copy()
        inv_s = 1.0 / self.s
        return Sim3._wrap(Rt, -inv_s * (Rt @ self.t), inv_s)

    def __matmul__(self, other):
        if isinstance(other, SE3):
            other = Sim3.from_se3(other)
        return Sim3._wrap(self.R @ other.R, self.s * (self.R @ other.t) + self.t, self.s * other.s)

    def act(self, p):
        p = np.asarray(p, dtype=float)
        return self.s * (p @ self.R.T) + self.t

    def retract(self, delta):
        return self @ Sim3.exp(delta)

    def local(self, other):
        return (self.inverse() @ other).log()

    def adjoint(self):
        A = np.zeros((7, 7))
        A[:3, :3] = self.s * self.R
        A[:3, 3:6] = hat(self.t) @ self.R
        A[:3, 6] = -self.t
        A[3:6, 3:6] = self.R
        A[6, 6] = 1.0
        return A

    def center(self):
        return -self.R.T @ self.t / self.s

    def __repr__(self):
        return f"Sim3(t={np.round(self.t, 6).tolist()}, q={np.round(self.quaternion, 6).tolist()}, s={self.s:.6f})"


# module-level aliases mirroring the operation list


def se3_exp(xi):
    return SE3.exp(xi)


def se3_log(T):
    return T.log()


def sim3_exp(xi):
    return Sim3.exp(xi)


def sim3_log(S):
    return S.log()


def compose(A, B):
    return A @ B


def inverse(A):
    return A.inverse()


def act(A, p):
    return A.act(p)


def relative(T_i, T_j):
    """Transform taking camera-i coordinates to camera-j coordinates."""
    return T_j @ T_i.inverse()


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------


def ad_matrix(xi):
    """Matrix of ``ad_xi`` on se(3) (6-vector) or sim(3) (7-vector)."""
    xi = np.asarray(xi, dtype=float)
    rho, omega = xi[:3], xi[3:6]
    if xi.size == 6:
        A = np.zeros((6, 6))
        A[:3, :3] = hat(omega)
        A[:3, 3:] = hat(rho)
        A[3:, 3:] = hat(omega)
        return A
    sigma = xi[6]
    A = np.zeros((7, 7))
    A[:3, :3] = hat(omega) + sigma * np.eye(3)
    A[:3, 3:6] = hat(rho)
    A[:3, 6] = -rho
    A[3:6, 3:6] = hat(omega)
    return A


def right_jacobian(xi):
    """``Jr(xi) = sum_k (-ad_xi)^k / (k+1)!`` summed to machine precision."""
    M = -ad_matrix(xi)
    eye = np.eye(M.shape[0])
    # the induced inf-norm bounds every power, so it fixes the number of terms up front
    norm = float(np.abs(M).sum(axis=1).max())
    terms, bound = 1, 0.5 * norm
    while bound > 1e-17 and terms < 80:
        terms += 1
        bound *= norm / (terms + 1)
    total = eye
    for k in range(terms, 0, -1):
        total = eye + (M @ total) / (k + 1)
    return total


def right_jacobian_inv(xi):
    return np.linalg.inv(right_jacobian(xi))


def relpose_residual_jacobian(T_prior, T_i, T_j):
    """Relative-pose prior residual ``Log(T_prior @ T_j @ T_i^-1)``.

    ``T_prior`` is the measured transform from camera j to camera i, so the
    residual vanishes when it equals ``T_i @ T_j^-1``. Returns the residual
    and the Jacobians with respect to ``T_i`` and ``T_j``.
    """
    r = (T_prior @ relative(T_i, T_j)).log()
    J = right_jacobian_inv(r) @ T_i.adjoint()
    return r, -J, J


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def at_level(self, level):
        """Intrinsics of pyramid level ``level`` (pixel centres at integer coordinates)."""
        f = 0.5**level
        return CameraIntrinsics(
            self.fx * f,
            self.fy * f,
            (self.cx + 0.5) * f - 0.5,
            (self.cy + 0.5) * f - 0.5,
            self.width >> level,
            self.height >> level,
        )

    def bearings(self, uv):
        """Rays with unit z-component through pixels ``uv`` (N x 2)."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def in_image(self, uv, margin=0.0):
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] <= self.width - 1 - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] <= self.height - 1 - margin)
        )


def project(K, p_cam):
    p = np.asarray(p_cam, dtype=float)
    if not p[2] > 0.0:
        raise BehindCameraError(f"point has non-positive depth {p[2]}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def project_points(K, P):
    """Vectorised projection. Returns ``(uv, valid)``; invalid rows are behind the camera."""
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * P[..., 0] / zs + K.cx, K.fy * P[..., 1] / zs + K.cy], axis=-1)
    return uv, valid


def projection_jacobian(K, P):
    """d(uv)/d(P) for camera-frame points P (N x 3) -> (N, 2, 3)."""
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    iz = 1.0 / z
    J = np.zeros(P.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx * iz
    J[..., 0, 2] = -K.fx * x * iz * iz
    J[..., 1, 1] = K.fy * iz
    J[..., 1, 2] = -K.fy * y * iz * iz
    return J


def reprojection_residual_jacobian(K, T, X, uv):
    """Residuals ``project(T X) - uv`` and their Jacobian w.r.t. ``T`` (N, 2, 6)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Pc = T.act(X)
    proj, _ = project_points(K, Pc)
    r = proj - uv
    Jp = projection_jacobian(K, Pc)
    # d(T Exp(e) X)/de = R [I | -X^]
    dP = np.zeros(X.shape[:-1] + (3, 6))
    dP[..., :, :3] = T.R
    dP[..., :, 3:] = -np.einsum("ij,njk->nik", T.R, hat_batch(X))
    return r, Jp @ dP


# ---------------------------------------------------------------------------
# Text serialization ("tx ty tz qx qy qz qw [s]")
# ---------------------------------------------------------------------------


def pose_to_fields(pose):
    vals = list(pose.t) + list(pose.quaternion)
    if isinstance(pose, Sim3):
        vals.append(pose.s)
    return " ".join(f"{v:.9f}" for v in vals)


def pose_from_fields(fields):
    vals = [float(v) for v in fields]
    if len(vals) == 7:
        return SE3.from_quaternion(vals[3:7], vals[:3])
    if len(vals) == 8:
        return Sim3.from_quaternion(vals[3:7], vals[:3], vals[7])
    raise ValueError(f"expected 7 or 8 pose fields, got {len(vals)}")


def random_rotation(rng, max_angle=math.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))
