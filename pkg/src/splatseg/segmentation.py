"""Clustering of the feature field into object groups, plus rendering/scoring.

Clustering runs DBSCAN (cosine distance on L2-normalized smoothed features)
over a small uniform subsample and propagates the resulting labels to every
remaining Gaussian via nearest clustered sample by cosine similarity. Labels
are 1..N_c; label 0 is reserved for Gaussians dropped by outlier filtering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateClusteringError, FormatError
from .feature_learn import FeatureField, normalize_rows, smooth_features
from .rasterizer import rasterize
from .scene import CameraView, DynamicScene, apply_deformation

CLUSTER_MAGIC = b"SADGMAP1"
CLUSTER_FILE_EXT = ".sadgmap"


@dataclass
class SegConfig:
    eps: float = 0.1             # cosine-distance radius
    min_pts: int = 10
    subsample_frac: float = 0.02
    filter_t: float = 0.8

    def validate(self) -> None:
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not (0.0 < self.subsample_frac <= 1.0):
            raise ConfigError(f"subsample_frac must be in (0, 1], got {self.subsample_frac}")
        if not (-1.0 <= self.filter_t <= 1.0):
            raise ConfigError(f"filter_t must be in [-1, 1], got {self.filter_t}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass
class ClusterMap:
    labels: np.ndarray      # (N,) int32 in {0..n_clusters}; 0 = removed by filtering
    n_clusters: int
    centroids: np.ndarray   # (n_clusters, 32) mean smoothed features per label
    sample_idx: np.ndarray  # indices of the subsampled Gaussians fed to DBSCAN

    @property
    def n(self) -> int:
        return len(self.labels)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CLUSTER_MAGIC)
            f.write(struct.pack("<3I", self.n, self.n_clusters, len(self.sample_idx)))
            f.write(np.ascontiguousarray(self.labels, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.sample_idx, dtype="<u4").tobytes())

    @staticmethod
    def load(path) -> "ClusterMap":
        data = Path(path).read_bytes()
        if len(data) < 20 or data[:8] != CLUSTER_MAGIC:
            raise FormatError("bad cluster map header")
        n, n_c, n_s = struct.unpack_from("<3I", data, 8)
        off = 20
        need = 4 * (n + n_c * 32 + n_s)
        if len(data) != off + need:
            raise FormatError(f"cluster map payload has {len(data) - off} bytes, expected {need}")
        labels = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int32)
        off += 4 * n
        centroids = np.frombuffer(data, dtype="<f4", count=n_c * 32, offset=off).astype(np.float64).reshape(n_c, 32)
        off += 4 * n_c * 32
        sample_idx = np.frombuffer(data, dtype="<u4", count=n_s, offset=off).astype(np.int64)
        return ClusterMap(labels=labels, n_clusters=int(n_c), centroids=centroids, sample_idx=sample_idx)


# ---------------------------------------------------------------------------
# DBSCAN (production path: vectorized neighborhoods + stack expansion)


def cosine_neighbor_lists(x_norm: np.ndarray, eps: float, chunk: int = 2048) -> list:
    """eps-neighborhoods under distance 1 - cosine, computed in row blocks."""
    n = len(x_norm)
    out = []
    thresh = 1.0 - eps
    for start in range(0, n, chunk):
        sims = x_norm[start : start + chunk] @ x_norm.T
        for row in sims >= thresh:
            out.append(np.flatnonzero(row))
    return out


def dbscan_cosine(x_norm: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (-1 = noise, clusters numbered from 0 in seed order).

    Seeds are taken in index order and each cluster is fully expanded before
    the next seed, so border points always join the earliest cluster that
    reaches them.
    """
    n = len(x_norm)
    neighbors = cosine_neighbor_lists(x_norm, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, -1, dtype=np.int32)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            q = stack.pop()
            for nb in neighbors[q]:
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        stack.append(nb)
        cluster += 1
    return labels


def _nearest_label(feats_norm: np.ndarray, anchors_norm: np.ndarray,
                   anchor_labels: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(feats_norm), dtype=np.int32)
    for start in range(0, len(feats_norm), chunk):
        sims = feats_norm[start : start + chunk] @ anchors_norm.T
        out[start : start + chunk] = anchor_labels[np.argmax(sims, axis=1)]
    return out


def cluster(field: FeatureField, cfg: SegConfig, rng=None) -> ClusterMap:
    """Cluster the field into object groups with subsample-and-propagate DBSCAN."""
    cfg.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    smoothed = smooth_features(field)
    feats_norm, norms = normalize_rows(smoothed)
    if np.all(norms == 0):
        raise ConfigError("feature field is all zeros; train it before clustering")

    n = field.n
    n_sub = max(1, int(round(cfg.subsample_frac * n)))
    sample_idx = np.sort(rng.choice(n, size=n_sub, replace=False))
    sub_labels = dbscan_cosine(feats_norm[sample_idx], cfg.eps, cfg.min_pts)

    clustered = sub_labels >= 0
    if not clustered.any():
        raise DegenerateClusteringError(
            f"all {n_sub} subsampled points are noise (eps={cfg.eps}, min_pts={cfg.min_pts})"
        )

    anchors = sample_idx[clustered]
    anchor_labels = sub_labels[clustered] + 1  # final labels are 1-based
    labels = np.empty(n, dtype=np.int32)
    labels[anchors] = anchor_labels
    rest = np.ones(n, dtype=bool)
    rest[anchors] = False
    if rest.any():
        labels[rest] = _nearest_label(feats_norm[rest], feats_norm[anchors], anchor_labels)

    n_clusters = int(sub_labels.max()) + 1
    centroids = _centroids(smoothed, labels, n_clusters)
    return ClusterMap(labels=labels, n_clusters=n_clusters, centroids=centroids, sample_idx=sample_idx)


def _centroids(smoothed: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    cents = np.zeros((n_clusters, smoothed.shape[1]))
    for c in range(1, n_clusters + 1):
        members = labels == c
        if members.any():
            cents[c - 1] = smoothed[members].mean(axis=0)
    return cents


def filter_cluster(cmap: ClusterMap, field: FeatureField, cluster_id: int, t: float) -> ClusterMap:
    """Drop cluster members whose cosine similarity to the cluster mean is below t.

    Dropped Gaussians are relabeled 0; membership never grows. t is clamped
    to [-1, 1], so t = -1 is the identity and t = 1 keeps only members exactly
    on the centroid direction.
    """
    if not (1 <= cluster_id <= cmap.n_clusters):
        raise ValueError(f"cluster_id {cluster_id} out of range 1..{cmap.n_clusters}")
    t = float(np.clip(t, -1.0, 1.0))
    smoothed = smooth_features(field)
    members = cmap.members(cluster_id)
    centroid = cmap.centroids[cluster_id - 1]
    c_norm = np.linalg.norm(centroid)
    labels = cmap.labels.copy()
    if c_norm > 0 and len(members):
        feats = smoothed[members]
        norms = np.linalg.norm(feats, axis=1)
        sims = np.where(norms > 0, feats @ centroid / (np.maximum(norms, 1e-300) * c_norm), -1.0)
        labels[members[sims < t]] = 0
    centroids = _centroids(smoothed, labels, cmap.n_clusters)
    return ClusterMap(labels=labels, n_clusters=cmap.n_clusters,
                      centroids=centroids, sample_idx=cmap.sample_idx)


# ---------------------------------------------------------------------------
# rendering and scoring


def label_weight_image(gaussians, cam: CameraView, labels: np.ndarray, n_labels: int,
                       tile_size: int = 16):
    """Per-pixel summed blend weight for each label plus accumulated alpha.

    Returns (weight map (H, W, n_labels + 1), alpha (H, W)); column k holds
    label k, with column 0 collecting filtered/unlabeled mass.
    """
    out = rasterize(gaussians, cam, want_weights=True, want_color=False, tile_size=tile_size)
    h, w = cam.height, cam.width
    pw = out.weights
    pix_rows = np.repeat(np.arange(h * w, dtype=np.int64), np.diff(pw.ptr))
    flat = np.bincount(pix_rows * (n_labels + 1) + labels[pw.idx],
                       weights=pw.w, minlength=h * w * (n_labels + 1))
    return flat.reshape(h, w, n_labels + 1), out.alpha


def render_segmentation(scene: DynamicScene, cmap: ClusterMap, cam: CameraView, t: float,
                        selection=None, tile_size: int = 16) -> np.ndarray:
    """Label image (argmax of per-label weight mass) or a binary selection mask.

    With a selection (iterable of cluster ids), a pixel is set when the
    selected clusters' summed blend weight exceeds half the accumulated alpha.
    """
    if cmap.n != scene.n_gaussians:
        raise ValueError(f"cluster map covers {cmap.n} gaussians, scene has {scene.n_gaussians}")
    gs_t = apply_deformation(scene, t)
    wmap, alpha = label_weight_image(gs_t, cam, cmap.labels, cmap.n_clusters, tile_size)
    if selection is None:
        labels = np.argmax(wmap, axis=2).astype(np.int32)
        labels[alpha <= 0.0] = 0
        return labels
    sel = sorted(set(int(s) for s in selection))
    if any(s < 1 or s > cmap.n_clusters for s in sel):
        raise ValueError(f"selection {sel} outside 1..{cmap.n_clusters}")
    if not sel:
        return np.zeros((cam.height, cam.width), dtype=bool)
    sel_w = wmap[:, :, sel].sum(axis=2)
    return sel_w > 0.5 * alpha


def score(pred_masks: np.ndarray, gt_masks: np.ndarray) -> tuple:
    """(mIoU, mAcc) over (frames, objects, H, W) boolean mask stacks.

    IoU of an object absent from both prediction and ground truth in a frame
    is 1. Means are taken over frames first, then over objects.
    """
    pred = np.asarray(pred_masks, dtype=bool)
    gt = np.asarray(gt_masks, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask stacks differ in shape: {pred.shape} vs {gt.shape}")
    if pred.ndim != 4:
        raise ValueError(f"expected (frames, objects, H, W), got shape {pred.shape}")
    iou, acc = score_per_object(pred, gt)
    return float(iou.mean()), float(acc.mean())


def score_per_object(pred: np.ndarray, gt: np.ndarray) -> tuple:
    """Per-object IoU and accuracy, each averaged over frames."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    inter = np.logical_and(pred, gt).sum(axis=(2, 3)).astype(np.float64)
    union = np.logical_or(pred, gt).sum(axis=(2, 3)).astype(np.float64)
    iou = np.where(union > 0, inter / np.maximum(union, 1.0), 1.0)
    correct = (pred == gt).sum(axis=(2, 3)).astype(np.float64)
    acc = correct / (pred.shape[2] * pred.shape[3])
    return iou.mean(axis=0), acc.mean(axis=0)


def label_palette(n: int) -> np.ndarray:
    """n visually distinct RGB colors in [0, 1] (golden-angle hue walk)."""
    import colorsys

    hues = (np.arange(n) * 0.61803398875) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.75, 0.95) for h in hues])


def colorize_labels(label_img: np.ndarray, n_clusters: int) -> np.ndarray:
    """Label image -> RGB visualization; label 0 renders black."""
    palette = np.vstack([[0.0, 0.0, 0.0], label_palette(max(n_clusters, 1))])
    return palette[np.clip(label_img, 0, n_clusters)]
