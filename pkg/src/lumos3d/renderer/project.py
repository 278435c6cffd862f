"""Per-Gaussian preprocessing: EWA covariance projection, SH color, and their adjoints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sh import sh_basis


def quat_rotmat(q):
    """Dtype-preserving (N, 4) -> (N, 3, 3); ``q`` must already be normalized."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rotmat_vjp(q, gR):
    """Cotangent of a normalized quaternion given the rotation-matrix cotangent ``gR``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class Projected:
    """Screen-space splats for one camera; arrays are indexed like the scene."""

    means2d: np.ndarray   # (N, 2)
    cov2d: np.ndarray     # (N, 2, 2), lowpass included
    conics: np.ndarray    # (N, 3): a, b, c of the inverse covariance
    depths: np.ndarray    # (N,) camera z
    colors: np.ndarray    # (N, 3)
    valid: np.ndarray     # (N,) bool, inside [near, far]
    # saved for the backward pass
    p_cam: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    R: np.ndarray
    sigma: np.ndarray
    T: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    sh_raw: np.ndarray


def preprocess(centers, rotations, scales, sh, sh_degree, cam, near, far, lowpass) -> Projected:
    dt = centers.dtype
    W = cam.R.astype(dt)
    p_cam = centers @ W.T + cam.t.astype(dt)
    z_raw = p_cam[:, 2]
    valid = (z_raw >= near) & (z_raw <= far)
    z = np.where(valid, z_raw, 1.0).astype(dt)
    x, y = p_cam[:, 0], p_cam[:, 1]
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)

    qnorm = np.linalg.norm(rotations, axis=1)
    qn = rotations / qnorm[:, None]
    R = quat_rotmat(qn)
    M = R * scales[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)

    J = np.zeros((len(centers), 2, 3), dtype=dt)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    T = J @ W
    cov2d = T @ sigma @ T.transpose(0, 2, 1)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    means2d = np.stack([fx * x / z + dt.type(cam.cx), fy * y / z + dt.type(cam.cy)], axis=1)

    v = centers - cam.center.astype(dt)
    dist = np.linalg.norm(v, axis=1)
    dirs = v / np.maximum(dist, 1e-12)[:, None]
    basis = sh_basis(dirs, sh_degree)
    sh_raw = np.einsum("nk,nkc->nc", basis, sh) + dt.type(0.5)
    colors = np.maximum(sh_raw, 0)
    return Projected(means2d, cov2d, conics, z_raw, colors, valid,
                     p_cam, qn, qnorm, R, sigma, T, dirs, dist, sh_raw)


def preprocess_backward(pr: Projected, centers, scales, sh, sh_degree, cam,
                        g_means2d, g_conics, g_opac, g_colors, g_depths):
    """Chain screen-space cotangents back to scene parameters (all float64)."""
    f8 = np.float64
    valid = pr.valid
    g_means2d = np.where(valid[:, None], g_means2d, 0.0)
    g_conics = np.where(valid[:, None], g_conics, 0.0)
    g_colors = np.where(valid[:, None], g_colors, 0.0)
    g_depths = np.where(valid, g_depths, 0.0)
    g_opac = np.where(valid, g_opac, 0.0)

    W = cam.R.astype(f8)
    p = pr.p_cam.astype(f8)
    x, y = p[:, 0], p[:, 1]
    z = np.where(valid, p[:, 2], 1.0)
    fx, fy = float(cam.fx), float(cam.fy)
    cov = pr.cov2d.astype(f8)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det
    conic[:, 1, 1] = cov[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det

    G_conic = np.empty_like(cov)
    G_conic[:, 0, 0] = g_conics[:, 0]
    G_conic[:, 0, 1] = G_conic[:, 1, 0] = 0.5 * g_conics[:, 1]
    G_conic[:, 1, 1] = g_conics[:, 2]
    G_cov = -conic @ G_conic @ conic

    T = pr.T.astype(f8)
    sigma = pr.sigma.astype(f8)
    G_sigma = T.transpose(0, 2, 1) @ G_cov @ T
    G_T = 2.0 * G_cov @ T @ sigma
    G_J = G_T @ W.T

    g_p = np.zeros_like(p)
    z2, z3 = z * z, z * z * z
    g_p[:, 0] = -fx / z2 * G_J[:, 0, 2] + g_means2d[:, 0] * fx / z
    g_p[:, 1] = -fy / z2 * G_J[:, 1, 2] + g_means2d[:, 1] * fy / z
    g_p[:, 2] = (-fx / z2 * G_J[:, 0, 0] + 2 * fx * x / z3 * G_J[:, 0, 2]
                 - fy / z2 * G_J[:, 1, 1] + 2 * fy * y / z3 * G_J[:, 1, 2]
                 - g_means2d[:, 0] * fx * x / z2 - g_means2d[:, 1] * fy * y / z2
                 + g_depths)
    g_centers = g_p @ W

    R = pr.R.astype(f8)
    s = scales.astype(f8)
    G_M = 2.0 * G_sigma @ (R * s[:, None, :])
    g_scales = np.einsum("nik,nik->nk", G_M, R)
    G_R = G_M * s[:, None, :]
    qn = pr.qn.astype(f8)
    g_qn = quat_rotmat_vjp(qn, G_R)
    g_rot = (g_qn - np.sum(g_qn * qn, axis=1, keepdims=True) * qn) / pr.qnorm.astype(f8)[:, None]

    dirs = pr.dirs.astype(f8)
    basis, jac = sh_basis(dirs, sh_degree, with_grad=True)
    g_raw = np.where(pr.sh_raw > 0, g_colors, 0.0)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    g_dir = np.einsum("nkc,nc,nkd->nd", sh.astype(f8), g_raw, jac)
    g_dir -= np.sum(g_dir * dirs, axis=1, keepdims=True) * dirs
    g_centers += g_dir / np.maximum(pr.dist.astype(f8), 1e-12)[:, None]
    return g_centers, g_opac, g_rot, g_scales, g_sh
