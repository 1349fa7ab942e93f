"""Photometric residuals of an 8-pixel point pattern warped between frames."""

from __future__ import annotations

import numpy as np

# residual pattern around each point (du, dv), level pixels
PATTERN = np.array([(0, -2), (-1, -1), (1, -1), (-2, 0), (0, 0), (2, 0), (-1, 1), (0, 2)], dtype=float)
HUBER = 9.0 / 255.0


def bilinear(image, uv, index=None):
    """Intensity and gradient at ``uv`` (..., 2).

    Coordinates are clamped to the image and the gradient is zero along a
    clamped axis, so the pair is an exact value/derivative pair everywhere.
    ``image`` may be a stack (K, H, W) addressed by ``index`` (broadcast
    against ``uv[..., 0]``).
    """
    h, w = image.shape[-2:]
    u = uv[..., 0]
    v = uv[..., 1]
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc).astype(int), w - 2)
    y0 = np.minimum(np.floor(vc).astype(int), h - 2)
    a = uc - x0
    b = vc - y0
    flat = image.reshape(-1)
    base = y0 * w + x0
    if image.ndim == 3:
        base = base + np.asarray(index) * (h * w)
    i00, i10 = flat[base], flat[base + 1]
    i01, i11 = flat[base + w], flat[base + w + 1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    gu = ((1 - b) * (i10 - i00) + b * (i11 - i01)) * (uc == u)
    gv = ((1 - a) * (i01 - i00) + a * (i11 - i10)) * (vc == v)
    return val, np.stack([gu, gv], -1)


def inside(image_shape, uv, margin=0.0):
    h, w = image_shape[-2:]
    return (uv[..., 0] >= margin) & (uv[..., 0] <= w - 1 - margin) & (uv[..., 1] >= margin) & (uv[..., 1] <= h - 1 - margin)


def level_pixels(uv, level):
    """Level-0 pixel coordinates expressed on pyramid level ``level``."""
    return (np.asarray(uv, float) + 0.5) * 0.5**level - 0.5


def huber_weights(r, k=HUBER):
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-300))


def huber_energy(r, k=HUBER):
    a = np.abs(r)
    return np.where(a <= k, r * r, 2.0 * k * a - k * k)


def _bcast(R, t, n):
    R = np.asarray(R)
    if R.ndim == 2:
        return np.broadcast_to(R, (n, 3, 3)), np.broadcast_to(t, (n, 3))
    return R, t


def relative_rt(R_h, t_h, R_t, t_t):
    """Rotation and translation of ``T_t T_h^-1`` for stacked poses."""
    R_th = R_t @ np.swapaxes(R_h, -1, -2)
    t_th = t_t - (R_th @ t_h[..., None])[..., 0]
    return R_th, t_th


def warp_residuals(host_values, rays, idepth, host_pose, target_pose, image, camera, index=None, jacobians=True):
    """Residuals ``I_t(warp(p)) - I_h(p)`` for ``n`` points with ``P`` pattern rays.

    ``host_pose``/``target_pose`` are ``(R, t)`` pairs, either single
    poses or stacked per point (``(n, 3, 3)``, ``(n, 3)``). Returns
    ``r (n, P)``, ``front (n, P)`` (positive depth in the target),
    ``inb (n, P)`` (inside the target image) and,
    with ``jacobians``, the target-pose Jacobian ``(n, P, 6)`` and the
    inverse-depth Jacobian ``(n, P)``. The host-pose Jacobian is the
    negated target-pose Jacobian.
    """
    n = len(idepth)
    R_h, t_h = _bcast(*host_pose, n)
    R_t, t_t = _bcast(*target_pose, n)
    R_th, t_th = relative_rt(R_h, t_h, R_t, t_t)
    rho = idepth[:, None, None]
    # Y = R_th f + rho t_th is parallel to the metric target point
    Y = rays @ np.swapaxes(R_th, -1, -2) + rho * t_th[:, None, :]
    z = Y[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = np.stack([camera.fx * Y[..., 0] / zs + camera.cx, camera.fy * Y[..., 1] / zs + camera.cy], -1)
    val, g = bilinear(image, uv, None if index is None else np.asarray(index)[:, None])
    r = val - host_values
    inb = front & inside(image.shape, uv)
    if not jacobians:
        return r, front, inb
    gx = g[..., 0] * camera.fx / zs
    gy = g[..., 1] * camera.fy / zs
    gz = -(gx * Y[..., 0] + gy * Y[..., 1]) / zs
    gY = np.stack([gx, gy, gz], -1)
    # rho W = R_h^T (f - rho t_h): the world point scaled by the inverse depth
    rW = (rays - rho * t_h[:, None, :]) @ R_h
    gR = gY @ R_t
    # -g R_t hat(rho W) = (rho W) x (g R_t)
    cr = np.stack([rW[..., 1] * gR[..., 2] - rW[..., 2] * gR[..., 1],
                   rW[..., 2] * gR[..., 0] - rW[..., 0] * gR[..., 2],
                   rW[..., 0] * gR[..., 1] - rW[..., 1] * gR[..., 0]], -1)
    J_t = np.concatenate([rho * gR, cr], -1)
    J_rho = (gY @ t_th[:, :, None])[..., 0]
    return r, front, inb, J_t, J_rho


def pattern_rays(camera, uv, level=0):
    """Host rays ``(n, P, 3)`` and level pixels of each point's pattern."""
    pix = level_pixels(uv, level)[:, None, :] + PATTERN
    return camera.at_level(level).bearings(pix), pix
