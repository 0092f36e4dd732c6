"""Real spherical harmonics up to degree 3 for view-dependent splat color."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
]
C3 = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
]


def sh_basis(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Basis values Y_k(dir) for k < (degree+1)^2, shape (..., n_coeffs)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, C0)]
    if degree > 0:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            C2[0] * xy,
            C2[1] * yz,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * xz,
            C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * xy * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(out, axis=-1)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, degree: int = 3) -> np.ndarray:
    """RGB in [0, 1] for channel-major coefficients (..., 48) and unit directions (..., 3).

    Per channel: clamp(0.5 + sum_k c_k Y_k(dir), 0, 1).
    """
    sh = np.asarray(sh, dtype=np.float64)
    coeffs = sh.reshape(sh.shape[:-1] + (3, 16))
    basis = sh_basis(view_dir, degree)  # (..., n)
    n = basis.shape[-1]
    rgb = 0.5 + np.einsum("...ck,...k->...c", coeffs[..., :n], basis)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_dc(rgb) -> np.ndarray:
    """DC coefficients whose view-independent color equals rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
