"""Brute-force reference implementations used only for equivalence testing.

These trade every optimization for directness: the reference renderer walks
all splats per pixel off one global depth sort (no tiles, no footprint
culling), and the reference DBSCAN is the quadratic textbook algorithm. They
share only semantic constants with the production paths.
"""

from __future__ import annotations

import numpy as np

from .rasterizer import (ALPHA_MAX, ALPHA_MIN, COV_DILATION, DEPTH_EMPTY,
                         FRUSTUM_CLAMP, NEAR_PLANE, T_STOP, PixelWeights,
                         RenderOutput, splat_colors)
from .scene import CameraView, GaussianSet, quat_to_rotmat


def oracle_render(gaussians: GaussianSet, cam: CameraView,
                  payload: np.ndarray | None = None,
                  background=(0.0, 0.0, 0.0), want_color: bool = True) -> RenderOutput:
    """Per-pixel compositing over a single global depth sort of all splats."""
    h, w = cam.height, cam.width
    n = len(gaussians)
    bg = np.asarray(background, dtype=np.float64)
    if payload is not None:
        payload = np.asarray(payload, dtype=np.float64)

    pos = gaussians.positions.astype(np.float64)
    cam_pts = pos @ cam.R.T + cam.T
    z_all = cam_pts[:, 2]
    keep = np.flatnonzero(z_all > NEAR_PLANE)

    cam_pts = cam_pts[keep]
    z = cam_pts[:, 2]
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy

    rot = quat_to_rotmat(gaussians.rotations[keep].astype(np.float64))
    s = np.exp(gaussians.log_scales[keep].astype(np.float64))
    m = rot * s[:, None, :]
    cov3 = m @ m.transpose(0, 2, 1)
    lim_x = FRUSTUM_CLAMP * 0.5 * cam.width / cam.fx
    lim_y = FRUSTUM_CLAMP * 0.5 * cam.height / cam.fy
    tx = np.clip(x / z, -lim_x, lim_x) * z
    ty = np.clip(y / z, -lim_y, lim_y) * z
    jw = np.zeros((len(keep), 2, 3))
    jw[:, 0, 0] = cam.fx / z
    jw[:, 0, 2] = -cam.fx * tx / (z * z)
    jw[:, 1, 1] = cam.fy / z
    jw[:, 1, 2] = -cam.fy * ty / (z * z)
    jw = jw @ cam.R
    cov2 = jw @ cov3 @ jw.transpose(0, 2, 1)
    a = cov2[:, 0, 0] + COV_DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV_DILATION
    det = a * c - b * b
    ok = det > 0
    keep, u, v, z, a, b, c, det = (arr[ok] for arr in (keep, u, v, z, a, b, c, det))
    conic_a, conic_b, conic_c = c / det, -b / det, a / det
    opacity = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits[keep].astype(np.float64)))

    order = np.argsort(z, kind="stable")
    keep, u, v, z = keep[order], u[order], v[order], z[order]
    conic_a, conic_b, conic_c = conic_a[order], conic_b[order], conic_c[order]
    opacity = opacity[order]

    colors = splat_colors(gaussians, cam, 3)[keep] if want_color else None

    color = np.zeros((h, w, 3)) if want_color else None
    depth = np.full((h, w), DEPTH_EMPTY)
    alpha_img = np.zeros((h, w))
    feat = np.zeros((h, w, payload.shape[1])) if payload is not None else None
    w_pix: list = []
    w_idx: list = []
    w_val: list = []

    for py in range(h):
        for px in range(w):
            du = u - px
            dv = v - py
            power = 0.5 * (conic_a * du * du + conic_c * dv * dv) + conic_b * du * dv
            alphas = np.minimum(opacity * np.exp(-power), ALPHA_MAX)
            t = 1.0
            c_acc = np.zeros(3)
            d_acc = 0.0
            f_acc = np.zeros(payload.shape[1]) if payload is not None else None
            for i in range(len(alphas)):
                al = alphas[i]
                if al < ALPHA_MIN:
                    continue
                t_next = t * (1.0 - al)
                if t_next < T_STOP:
                    break
                wgt = al * t
                if want_color:
                    c_acc += wgt * colors[i]
                d_acc += wgt * z[i]
                if f_acc is not None:
                    f_acc += wgt * payload[keep[i]]
                w_pix.append(py * w + px)
                w_idx.append(keep[i])
                w_val.append(wgt)
                t = t_next
            acc = 1.0 - t
            alpha_img[py, px] = acc
            if want_color:
                color[py, px] = c_acc + t * bg
            if acc > 0.0:
                depth[py, px] = d_acc / acc
            if f_acc is not None:
                feat[py, px] = f_acc

    ptr = np.zeros(h * w + 1, dtype=np.int64)
    np.add.at(ptr, np.asarray(w_pix, dtype=np.int64) + 1, 1)
    np.cumsum(ptr, out=ptr)
    weights = PixelWeights(ptr=ptr, idx=np.asarray(w_idx, dtype=np.int64),
                           w=np.asarray(w_val, dtype=np.float64), n_gaussians=n, pixels=None)
    return RenderOutput(color=color, depth=depth, alpha=alpha_img, feature=feat,
                        weights=weights, width=w, height=h, pixels=None)


def oracle_dbscan(points: np.ndarray, eps: float, min_pts: int, metric: str = "cosine") -> np.ndarray:
    """Textbook quadratic DBSCAN; labels clusters from 0 in seed order, -1 = noise."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if metric == "cosine":
        norms = np.linalg.norm(pts, axis=1)
        unit = pts / np.where(norms > 0, norms, 1.0)[:, None]
        dist = 1.0 - unit @ unit.T
    elif metric == "euclidean":
        dist = np.sqrt(np.maximum(
            (pts * pts).sum(1)[:, None] + (pts * pts).sum(1)[None, :] - 2.0 * pts @ pts.T, 0.0))
    else:
        raise ValueError(f"unknown metric {metric!r}")

    neighborhoods = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in neighborhoods]
    labels = np.full(n, -1, dtype=np.int32)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neighborhoods[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(neighborhoods[j])
        cluster += 1
    return labels
