"""Real spherical-harmonic color evaluation up to degree 3."""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(dirs, degree: int, with_grad: bool = False):
    """Basis values (..., K) at ``dirs`` (..., 3); optionally the Jacobian (..., K, 3).

    The Jacobian is taken with respect to the raw (x, y, z) arguments of the
    polynomial basis; callers chain through the direction normalization.
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in [0, 3], got {degree}")
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    one, zero = np.ones_like(x), np.zeros_like(x)
    vals = [C0 * one]
    grads = [(zero, zero, zero)]
    if degree >= 1:
        vals += [-C1 * y, C1 * z, -C1 * x]
        grads += [(zero, -C1 * one, zero), (zero, zero, C1 * one), (-C1 * one, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        vals += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy), C2[3] * x * z,
                 C2[4] * (xx - yy)]
        grads += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        vals += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
        grads += [
            (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    basis = np.stack(vals, axis=-1)
    if not with_grad:
        return basis
    jac = np.stack([np.stack(g, axis=-1) for g in grads], axis=-2)
    return basis, jac


def eval_sh(sh, dirs) -> np.ndarray:
    """RGB = max(basis . coefficients + 0.5, 0). ``sh`` is (..., K, 3), ``dirs`` (..., 3)."""
    sh = np.asarray(sh)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    return np.maximum(np.einsum("...k,...kc->...c", basis, sh) + 0.5, 0.0)


def rotate_sh(sh, R) -> np.ndarray:
    """Coefficients of the color field rotated by ``R``: new(d) == old(R^T d).

    Each band is rotation-closed, so the per-band linear map is recovered
    exactly by least squares on a fixed set of sample directions.
    """
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    if degree == 0:
        return sh.copy()
    rng = np.random.default_rng(0)
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    B_new = sh_basis(d, degree)
    B_old = sh_basis(d @ np.asarray(R), degree)  # rows: (R^T d)^T = d^T R
    M = np.zeros((B_new.shape[1],) * 2)
    for band in range(degree + 1):
        sl = slice(band * band, (band + 1) * (band + 1))
        # B_new[:, sl] @ M_band = B_old[:, sl]
        M[sl, sl] = np.linalg.lstsq(B_new[:, sl], B_old[:, sl], rcond=None)[0]
    return np.einsum("jk,...kc->...jc", M, sh)
