"""Prompt resolution (click, 2D mask) and object-level scene edits.

Prompts unproject through the rendered expected depth and select clusters via
a nearest-Gaussian lookup on the deformed scene. Edits never mutate their
input scene; they return new scene values (copy-on-write).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import sh as shlib
from .errors import EmptySceneError, NoObjectError
from .rasterizer import rasterize
from .scene import (CameraView, DeformationTrack, DynamicScene, GaussianSet,
                    apply_deformation, quat_multiply, quat_normalize,
                    rotmat_to_quat, unproject_point)
from .segmentation import ClusterMap

CLICK_ALPHA_GATE = 0.5


@dataclass
class ClickPrompt:
    u: int
    v: int
    camera_id: str
    t: float

    def validate(self, cam: CameraView) -> None:
        if not (0 <= self.u < cam.width and 0 <= self.v < cam.height):
            raise ValueError(f"click ({self.u}, {self.v}) outside {cam.width}x{cam.height} image")


@dataclass
class Selection:
    cluster_ids: set
    scene_name: str = ""

    def validate(self, cmap: ClusterMap) -> None:
        bad = [c for c in self.cluster_ids if not (1 <= c <= cmap.n_clusters)]
        if bad:
            raise ValueError(f"selection contains invalid cluster ids {bad} (valid: 1..{cmap.n_clusters})")


def _labeled_kdtree(gs_t: GaussianSet, labels: np.ndarray):
    """KD-tree over deformed positions of Gaussians that belong to a cluster.

    Filtered Gaussians (label 0) are no longer part of any object, so they are
    excluded from prompt lookups.
    """
    keep = np.flatnonzero(labels > 0)
    if len(keep) == 0:
        raise NoObjectError("no gaussians carry a cluster label")
    return cKDTree(gs_t.positions[keep].astype(np.float64)), keep


def click_to_cluster(scene: DynamicScene, cmap: ClusterMap, prompt: ClickPrompt) -> int:
    """Cluster id under a clicked pixel of a rendered novel view.

    The click unprojects with the rendered expected depth (valid only where
    accumulated alpha >= 0.5) and selects the nearest deformed Gaussian's
    cluster.
    """
    cam = scene.camera(prompt.camera_id)
    prompt.validate(cam)
    gs_t = apply_deformation(scene, prompt.t)
    pix = np.array([[prompt.u, prompt.v]], dtype=np.int64)
    out = rasterize(gs_t, cam, want_color=False, pixel_subset=pix)
    alpha = float(out.alpha[0])
    depth = float(out.depth[0])
    if alpha < CLICK_ALPHA_GATE or not np.isfinite(depth):
        raise NoObjectError(
            f"click at ({prompt.u}, {prompt.v}) hit background (alpha={alpha:.3f})"
        )
    p_world = unproject_point(cam, prompt.u, prompt.v, depth)
    tree, keep = _labeled_kdtree(gs_t, cmap.labels)
    _, j = tree.query(p_world)
    return int(cmap.labels[keep[int(j)]])


def mask_to_clusters(scene: DynamicScene, cmap: ClusterMap, mask: np.ndarray,
                     camera_id: str, t: float, vote_frac: float = 0.5) -> set:
    """Clusters selected by an external 2D mask through depth reprojection.

    Every masked pixel with valid depth votes for its nearest Gaussian's
    cluster; a cluster is selected when its votes reach vote_frac times the
    number of its Gaussians visible in this view. An all-zero mask selects
    nothing.
    """
    cam = scene.camera(camera_id)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (cam.height, cam.width):
        raise ValueError(f"mask shape {mask.shape} does not match {cam.height}x{cam.width} camera")
    vs, us = np.nonzero(mask)
    if len(us) == 0:
        return set()

    gs_t = apply_deformation(scene, t)
    out = rasterize(gs_t, cam, want_color=False, want_weights=True)
    alpha = out.alpha[vs, us]
    depth = out.depth[vs, us]
    valid = (alpha >= CLICK_ALPHA_GATE) & np.isfinite(depth)
    if not valid.any():
        return set()
    us, vs, depth = us[valid], vs[valid], depth[valid]

    # batch unprojection: p_world = R^T (d * K^-1 [u v 1]^T - T)
    k_inv = np.linalg.inv(cam.K)
    pix_h = np.stack([us, vs, np.ones_like(us)], axis=0).astype(np.float64)
    p_cam = (k_inv @ pix_h) * depth[None, :]
    p_world = (cam.R.T @ (p_cam - cam.T[:, None])).T

    tree, keep = _labeled_kdtree(gs_t, cmap.labels)
    _, nearest = tree.query(p_world)
    vote_labels = cmap.labels[keep[nearest]]
    votes = np.bincount(vote_labels, minlength=cmap.n_clusters + 1)

    # visibility = carries nonzero blend weight somewhere in this view
    pw = out.weights
    visible = np.zeros(scene.n_gaussians, dtype=bool)
    visible[pw.idx[pw.w > 0]] = True
    visible_per_cluster = np.bincount(cmap.labels[visible], minlength=cmap.n_clusters + 1)

    selected = set()
    for c in range(1, cmap.n_clusters + 1):
        if visible_per_cluster[c] > 0 and votes[c] >= vote_frac * visible_per_cluster[c]:
            selected.add(c)
    return selected


# ---------------------------------------------------------------------------
# edits


def _subset_scene(scene: DynamicScene, keep: np.ndarray, name: str) -> DynamicScene:
    return DynamicScene(
        gaussians=scene.gaussians.take(keep),
        track=scene.track.take(keep),
        cameras=scene.cameras,
        name=name,
        features=None if scene.features is None else scene.features[keep],
    )


def remove_objects(scene: DynamicScene, cmap: ClusterMap, sel: Selection) -> DynamicScene:
    """New scene without the selected clusters' Gaussians (deltas/features dropped too)."""
    if not sel.cluster_ids:
        raise ValueError("selection is empty")
    sel.validate(cmap)
    if set(sel.cluster_ids) >= set(range(1, cmap.n_clusters + 1)):
        raise EmptySceneError("refusing to remove every cluster in the scene")
    drop = np.isin(cmap.labels, list(sel.cluster_ids))
    keep = np.flatnonzero(~drop)
    if len(keep) == 0:
        raise EmptySceneError("removal would leave an empty scene")
    return _subset_scene(scene, keep, scene.name)


def _resample_track(track: DeformationTrack, times: np.ndarray) -> DeformationTrack:
    """Linear resampling of keyframe deltas onto a new time grid."""
    dpos = np.stack([track.deltas_at(t)[0] for t in times])
    drot = np.stack([track.deltas_at(t)[1] for t in times])
    dscale = np.stack([track.deltas_at(t)[2] for t in times])
    return DeformationTrack(times.copy(), dpos, drot, dscale)


def compose(src: DynamicScene, src_map: ClusterMap, sel: Selection, dst: DynamicScene,
            scale: float = 1.0, rotation: np.ndarray | None = None,
            translation=(0.0, 0.0, 0.0)) -> DynamicScene:
    """Insert the selected objects of src into dst under a similarity transform.

    Positions map as s*Rc*x + tc, rotations compose with quat(Rc), scales pick
    up log(s); deformation deltas transform consistently and are resampled onto
    dst's keyframe times. dst's cameras and track length are preserved.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rc = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    if rc.shape != (3, 3) or np.abs(rc @ rc.T - np.eye(3)).max() > 1e-6:
        raise ValueError("rotation must be a 3x3 orthonormal matrix")
    tc = np.asarray(translation, dtype=np.float64)
    sel.validate(src_map)
    pick = np.flatnonzero(np.isin(src_map.labels, list(sel.cluster_ids)))
    if len(pick) == 0:
        raise ValueError("selection matches no gaussians in the source scene")

    qc = rotmat_to_quat(rc)
    g = src.gaussians.take(pick)
    pos = (g.positions.astype(np.float64) @ rc.T) * scale + tc
    rot = quat_multiply(qc, g.rotations.astype(np.float64))
    log_s = g.log_scales.astype(np.float64) + np.log(scale)
    moved = GaussianSet(pos, rot, log_s, g.opacity_logits, g.sh)

    src_track = _resample_track(src.track.take(pick), dst.track.times)
    dpos = (src_track.dpos.astype(np.float64) @ rc.T) * scale
    drot = quat_multiply(qc[None, None, :], src_track.drot.astype(np.float64))
    moved_track = DeformationTrack(dst.track.times, dpos, drot, src_track.dscale)

    n_src = len(pick)
    n_dst = dst.n_gaussians
    features = None
    if src.features is not None or dst.features is not None:
        dst_feat = dst.features if dst.features is not None else np.zeros((n_dst, 32), dtype=np.float32)
        src_feat = src.features[pick] if src.features is not None else np.zeros((n_src, 32), dtype=np.float32)
        features = np.concatenate([dst_feat, src_feat])

    if n_dst == 0:
        gaussians = moved
        track = moved_track
    else:
        gaussians = GaussianSet.concatenate(dst.gaussians, moved)
        track = DeformationTrack(
            dst.track.times,
            np.concatenate([dst.track.dpos, moved_track.dpos], axis=1),
            np.concatenate([dst.track.drot, moved_track.drot], axis=1),
            np.concatenate([dst.track.dscale, moved_track.dscale], axis=1),
        )
    return DynamicScene(gaussians=gaussians, track=track, cameras=dst.cameras,
                        name=dst.name, features=features)


def recolor(scene: DynamicScene, cmap: ClusterMap, sel: Selection, rgb) -> DynamicScene:
    """Set the selected objects' view-independent color to rgb (higher SH orders zeroed)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb must be three values in [0, 1]")
    sel.validate(cmap)
    pick = np.isin(cmap.labels, list(sel.cluster_ids))
    sh = scene.gaussians.sh.copy()
    block = np.zeros((int(pick.sum()), 48), dtype=np.float32)
    block[:, 0::16] = shlib.rgb_to_dc(rgb)[None, :].astype(np.float32)
    sh[pick] = block
    g = scene.gaussians
    gaussians = GaussianSet(g.positions, g.rotations, g.log_scales, g.opacity_logits, sh)
    return DynamicScene(gaussians=gaussians, track=scene.track, cameras=scene.cameras,
                        name=scene.name, features=scene.features)
