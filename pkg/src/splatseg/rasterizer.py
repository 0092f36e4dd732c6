"""Tile-based CPU alpha-compositing renderer for Gaussian splats.

Splats are projected with the EWA approximation (2D covariance J S J^T from
the world covariance), binned into screen tiles, depth-sorted front-to-back,
and composited per pixel with w_i = a_i * prod_{j<i} (1 - a_j). The per-pixel
blend weights can be recorded, which makes every rendered quantity (color,
depth, feature payload) an exact linear function of the per-splat inputs for
frozen geometry.

Compositing semantics shared with the reference renderer in `oracles`:
  * per-pixel alpha = min(0.99, opacity * exp(-0.5 d^T Sigma'^-1 d))
  * contributions with alpha < 1/255 are skipped and do not affect
    transmittance
  * compositing stops before the splat that would drive transmittance
    below 1e-4
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import sh as shlib
from .scene import CameraView, GaussianSet, quat_to_rotmat

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
COV_DILATION = 0.3
NEAR_PLANE = 0.2
FRUSTUM_CLAMP = 1.3  # clamp x/z, y/z to this multiple of the half-fov inside the Jacobian
# Beyond this many stddevs the clipped alpha is guaranteed below ALPHA_MIN,
# so tile culling cannot change the composited result.
CUTOFF_SIGMA = math.sqrt(2.0 * math.log(255.0))

DEPTH_EMPTY = np.inf


@dataclass
class PixelWeights:
    """CSR-style per-pixel blend weights, front-to-back within each pixel.

    Row p covers pixel `pixels[p]` (or flat raster index p when pixels is
    None); entries ptr[p]:ptr[p+1] list (gaussian index, weight) pairs.
    """

    ptr: np.ndarray            # (P + 1,) int64
    idx: np.ndarray            # (nnz,) int64 gaussian indices
    w: np.ndarray              # (nnz,) float64 blend weights
    n_gaussians: int
    pixels: np.ndarray | None  # (P, 2) int (u, v) or None for full raster order

    @property
    def n_pixels(self) -> int:
        return len(self.ptr) - 1

    def row(self, p: int):
        s, e = self.ptr[p], self.ptr[p + 1]
        return self.idx[s:e], self.w[s:e]

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.w, self.idx, self.ptr), shape=(self.n_pixels, self.n_gaussians))


@dataclass
class RenderOutput:
    """Rendered maps. Image-shaped when pixels is None, else one row per pixel."""

    color: np.ndarray | None    # (H, W, 3) or (P, 3) in [0, 1]
    depth: np.ndarray           # (H, W) or (P,); +inf where nothing composited
    alpha: np.ndarray           # (H, W) or (P,) accumulated opacity
    feature: np.ndarray | None  # (H, W, D) or (P, D)
    weights: PixelWeights | None
    width: int
    height: int
    pixels: np.ndarray | None   # (P, 2) int (u, v) when a subset was rendered


@dataclass
class ProjectedSplats:
    """Per-splat screen-space quantities in front-to-back order."""

    index: np.ndarray    # (M,) indices into the input set
    u: np.ndarray        # (M,)
    v: np.ndarray        # (M,)
    depth: np.ndarray    # (M,) camera-space z
    conic: np.ndarray    # (M, 3) upper triangle of inverse 2D covariance
    radius: np.ndarray   # (M,) cutoff radius in pixels
    opacity: np.ndarray  # (M,)


def project_gaussians(gaussians: GaussianSet, cam: CameraView) -> ProjectedSplats:
    """EWA projection of all splats; culls behind-camera and degenerate ones."""
    pos = gaussians.positions.astype(np.float64)
    cam_pts = pos @ cam.R.T + cam.T
    z = cam_pts[:, 2]
    valid = z > NEAR_PLANE

    idx = np.flatnonzero(valid)
    cam_pts = cam_pts[idx]
    z = z[idx]
    x, y = cam_pts[:, 0], cam_pts[:, 1]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy

    rot = quat_to_rotmat(gaussians.rotations[idx].astype(np.float64))
    s = np.exp(gaussians.log_scales[idx].astype(np.float64))
    m = rot * s[:, None, :]
    cov3 = m @ m.transpose(0, 2, 1)

    # the linearized projection degenerates far outside the frustum; clamp the
    # point fed to the Jacobian like the standard pipeline does
    lim_x = FRUSTUM_CLAMP * 0.5 * cam.width / cam.fx
    lim_y = FRUSTUM_CLAMP * 0.5 * cam.height / cam.fy
    tx = np.clip(x / z, -lim_x, lim_x) * z
    ty = np.clip(y / z, -lim_y, lim_y) * z

    jw = np.zeros((len(idx), 2, 3))
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
    idx, u, v, z, a, b, c, det = (arr[ok] for arr in (idx, u, v, z, a, b, c, det))

    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CUTOFF_SIGMA * np.sqrt(lam_max)
    opacity = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits[idx].astype(np.float64)))

    order = np.argsort(z, kind="stable")
    return ProjectedSplats(
        index=idx[order], u=u[order], v=v[order], depth=z[order],
        conic=conic[order], radius=radius[order], opacity=opacity[order],
    )


def splat_colors(gaussians: GaussianSet, cam: CameraView, degree: int = 3) -> np.ndarray:
    """Per-splat RGB from SH, evaluated toward the camera center."""
    dirs = gaussians.positions.astype(np.float64) - cam.center
    norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return shlib.eval_sh(gaussians.sh, dirs / norm, degree)


def _tile_lists(splats: ProjectedSplats, width, height, tile_size):
    """(tile ids, splat ranks) pairs sorted by tile, depth order kept within tiles."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    u, v, r = splats.u, splats.v, splats.radius
    inside = (u + r >= 0) & (u - r <= width - 1) & (v + r >= 0) & (v - r <= height - 1)

    tx0 = np.clip(np.floor((u - r) / tile_size), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + r) / tile_size), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - r) / tile_size), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + r) / tile_size), 0, nty - 1).astype(np.int64)
    nx = np.where(inside, tx1 - tx0 + 1, 0)
    ny = np.where(inside, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return ntx, nty, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64)

    ranks = np.repeat(np.arange(len(u), dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_r = np.repeat(np.maximum(nx, 1), counts)
    dx = k % nx_r
    dy = k // nx_r
    tiles = (np.repeat(ty0, counts) + dy) * ntx + np.repeat(tx0, counts) + dx

    order = np.argsort(tiles, kind="stable")
    tiles = tiles[order]
    ranks = ranks[order]
    bounds = np.flatnonzero(np.diff(tiles)) + 1
    starts = np.concatenate([[0], bounds])
    return ntx, nty, tiles, ranks, starts


def _composite(splats: ProjectedSplats, ranks: np.ndarray, px: np.ndarray,
               py: np.ndarray, chunk: int = 32):
    """Blend weights for one front-to-back pixel group.

    Rows are processed in chunks so fully-saturated pixel groups stop early;
    returns (weights over the processed row prefix, stop transmittance,
    number of rows processed).
    """
    g = len(ranks)
    p = len(px)
    t_run = np.ones(p)
    done = np.zeros(p, dtype=bool)
    w_parts = []
    g_used = 0
    for s in range(0, g, chunk):
        sub = ranks[s : s + chunk]
        c = len(sub)
        du = splats.u[sub][:, None] - px[None, :]
        dv = splats.v[sub][:, None] - py[None, :]
        con = splats.conic[sub]
        power = 0.5 * (con[:, 0:1] * du * du + con[:, 2:3] * dv * dv) + con[:, 1:2] * du * dv
        alpha = splats.opacity[sub][:, None] * np.exp(-power)
        np.minimum(alpha, ALPHA_MAX, out=alpha)
        alpha[alpha < ALPHA_MIN] = 0.0

        tb = np.cumprod(1.0 - alpha, axis=0) * t_run[None, :]
        t_before = np.empty_like(tb)
        t_before[0] = t_run
        t_before[1:] = tb[:-1]
        active = alpha > 0.0
        fail = active & (tb < T_STOP)
        newly_fail = fail.any(axis=0)
        first_fail = np.where(newly_fail, fail.argmax(axis=0), c)
        keep = active & (np.arange(c)[:, None] < first_fail[None, :]) & ~done[None, :]
        w_parts.append(np.where(keep, alpha * t_before, 0.0))
        g_used += c

        t_full = np.vstack([t_run[None, :], tb])
        t_new = np.take_along_axis(t_full, first_fail[None, :], axis=0)[0]
        t_run = np.where(done, t_run, t_new)
        done |= newly_fail
        if done.all():
            break
    w = np.concatenate(w_parts, axis=0) if w_parts else np.zeros((0, p))
    return w, t_run, g_used


def rasterize(
    gaussians: GaussianSet,
    cam: CameraView,
    payload: np.ndarray | None = None,
    *,
    want_weights: bool = False,
    pixel_subset: np.ndarray | None = None,
    background=(0.0, 0.0, 0.0),
    tile_size: int = 16,
    want_color: bool = True,
    sh_degree: int = 3,
) -> RenderOutput:
    """Render splats through the given camera.

    payload: optional (N, D) per-splat vectors composited with the same blend
    weights as color (rendering is linear in the payload).
    pixel_subset: optional (P, 2) int array of (u, v) pixels; outputs then have
    one row per requested pixel and weights are recorded only for those pixels.
    """
    w_img, h_img = cam.width, cam.height
    n = len(gaussians)
    if payload is not None:
        payload = np.asarray(payload, dtype=np.float64)
        if payload.shape[0] != n:
            raise ValueError(f"payload has {payload.shape[0]} rows for {n} gaussians")
    bg = np.asarray(background, dtype=np.float64)

    if pixel_subset is not None:
        pixel_subset = np.asarray(pixel_subset, dtype=np.int64)
        pu, pv = pixel_subset[:, 0], pixel_subset[:, 1]
        if np.any((pu < 0) | (pu >= w_img) | (pv < 0) | (pv >= h_img)):
            raise ValueError("pixel_subset contains out-of-image pixels")
        n_rows = len(pixel_subset)
    else:
        n_rows = w_img * h_img

    colors = splat_colors(gaussians, cam, sh_degree) if want_color else None
    splats = project_gaussians(gaussians, cam)

    color_acc = np.zeros((n_rows, 3)) if want_color else None
    depth_acc = np.zeros(n_rows)
    t_stop_all = np.ones(n_rows)
    feat_acc = np.zeros((n_rows, payload.shape[1])) if payload is not None else None
    coo_pix: list = []
    coo_idx: list = []
    coo_w: list = []

    ntx, nty, tiles, ranks, tile_starts = _tile_lists(splats, w_img, h_img, tile_size)

    if pixel_subset is not None:
        pix_tiles = (pv // tile_size) * ntx + (pu // tile_size)
        pix_order = np.argsort(pix_tiles, kind="stable")
    if len(tiles):
        tile_ids = tiles[np.concatenate([tile_starts, [len(tiles)]])[:-1]]
        tile_ends = np.concatenate([tile_starts[1:], [len(tiles)]])
        for tid, s, e in zip(tile_ids, tile_starts, tile_ends):
            group = ranks[s:e]
            if pixel_subset is not None:
                lo = np.searchsorted(pix_tiles[pix_order], tid, side="left")
                hi = np.searchsorted(pix_tiles[pix_order], tid, side="right")
                if lo == hi:
                    continue
                rows = pix_order[lo:hi]
                px = pu[rows].astype(np.float64)
                py = pv[rows].astype(np.float64)
            else:
                ty, tx = divmod(int(tid), ntx)
                xs = np.arange(tx * tile_size, min((tx + 1) * tile_size, w_img))
                ys = np.arange(ty * tile_size, min((ty + 1) * tile_size, h_img))
                gy, gx = np.meshgrid(ys, xs, indexing="ij")
                px = gx.ravel().astype(np.float64)
                py = gy.ravel().astype(np.float64)
                rows = (gy.ravel() * w_img + gx.ravel())

            w_mat, t_stop, g_used = _composite(splats, group, px, py)
            used = group[:g_used]
            t_stop_all[rows] = t_stop
            g_idx = splats.index[used]
            if want_color:
                color_acc[rows] = w_mat.T @ colors[g_idx]
            depth_acc[rows] = w_mat.T @ splats.depth[used]
            if feat_acc is not None:
                feat_acc[rows] = w_mat.T @ payload[g_idx]
            if want_weights:
                gi, pi = np.nonzero(w_mat.T)  # pixel-major: per-pixel front-to-back
                coo_pix.append(rows[gi])
                coo_idx.append(g_idx[pi])
                coo_w.append(w_mat.T[gi, pi])

    alpha = 1.0 - t_stop_all
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0.0, depth_acc / alpha, DEPTH_EMPTY)
    color = color_acc + t_stop_all[:, None] * bg[None, :] if want_color else None

    weights = None
    if want_weights:
        if coo_pix:
            pix = np.concatenate(coo_pix)
            gid = np.concatenate(coo_idx)
            ws = np.concatenate(coo_w)
            order = np.argsort(pix, kind="stable")  # keeps per-pixel depth order
            pix, gid, ws = pix[order], gid[order], ws[order]
        else:
            pix = np.empty(0, np.int64)
            gid = np.empty(0, np.int64)
            ws = np.empty(0, np.float64)
        ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(ptr, pix + 1, 1)
        np.cumsum(ptr, out=ptr)
        weights = PixelWeights(ptr=ptr, idx=gid, w=ws, n_gaussians=n,
                               pixels=None if pixel_subset is None else pixel_subset)

    if pixel_subset is None:
        if color is not None:
            color = color.reshape(h_img, w_img, 3)
        depth = depth.reshape(h_img, w_img)
        alpha = alpha.reshape(h_img, w_img)
        if feat_acc is not None:
            feat_acc = feat_acc.reshape(h_img, w_img, -1)
    return RenderOutput(color=color, depth=depth, alpha=alpha, feature=feat_acc,
                        weights=weights, width=w_img, height=h_img, pixels=pixel_subset)


# ---------------------------------------------------------------------------
# color loss


@dataclass
class ColorLossConfig:
    lambda_dssim: float = 0.2
    window_size: int = 11
    sigma: float = 1.5

    def validate(self) -> None:
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError(f"lambda_dssim must be in [0, 1], got {self.lambda_dssim}")


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _window_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering over the two leading (spatial) axes."""
    from scipy.ndimage import convolve1d

    pad = (len(kernel) - 1) // 2
    out = convolve1d(img, kernel, axis=0, mode="constant")[pad:-pad]
    out = convolve1d(out, kernel, axis=1, mode="constant")[:, pad:-pad]
    return out


def ssim(img_a: np.ndarray, img_b: np.ndarray, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid windows, Gaussian-weighted local statistics, data range 1."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError("image smaller than the SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    k = _gauss_kernel(window_size, sigma)
    mu_a = _window_filter(a, k)
    mu_b = _window_filter(b, k)
    var_a = _window_filter(a * a, k) - mu_a * mu_a
    var_b = _window_filter(b * b, k) - mu_b * mu_b
    cov = _window_filter(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def color_loss(rendered: np.ndarray, gt: np.ndarray, cfg: ColorLossConfig | None = None) -> float:
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2."""
    cfg = cfg or ColorLossConfig()
    cfg.validate()
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {g.shape}")
    l1 = float(np.mean(np.abs(g - r)))
    if cfg.lambda_dssim == 0.0:
        return l1
    dssim = (1.0 - ssim(r, g, cfg.window_size, cfg.sigma)) / 2.0
    return (1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dssim


# ---------------------------------------------------------------------------
# export


def save_png(img: np.ndarray, path) -> None:
    """Write a [0,1] float or uint8 image (H, W[, 3]) as 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_raw_f32(arr: np.ndarray, path) -> None:
    """Write raw little-endian float32 plus a JSON sidecar describing dims."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr).tobytes())
    sidecar = {
        "height": int(arr.shape[0]),
        "width": int(arr.shape[1]) if arr.ndim > 1 else 1,
        "channels": int(arr.shape[2]) if arr.ndim > 2 else 1,
        "dtype": "f32le",
        "order": "row-major",
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
