"""Per-Gaussian semantic feature field and its contrastive training loop.

Each Gaussian carries a 32-d feature vector. Features are smoothed over the
K nearest neighbors (by canonical 3D position), composited into screen space
with the frozen blend weights of the renderer, L2-normalized per pixel, and
compared pairwise through a cosine Gram matrix. The objective pulls same-mask
pixel pairs together and pushes cross-mask pairs apart, restricted to hard
pairs: positives with similarity below t_pos, negatives above t_neg.

The whole rendering chain (KNN mean -> blend -> normalize -> Gram) is linear
up to the row normalization, so the gradient with respect to the raw features
is computed exactly by the chain rule; no autodiff framework is involved.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .mask_codec import MaskSet, load_maskset, sample_masks
from .rasterizer import PixelWeights, RenderOutput, rasterize
from .scene import DynamicScene, FEATURE_DIM, apply_deformation


@dataclass
class TrainConfig:
    t_pos: float = 0.75
    t_neg: float = 0.5
    n_pixels: int = 5000
    m_prime: int = 25
    smooth_k: int = 16
    iters: int = 10000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if not (-1.0 <= self.t_neg < self.t_pos <= 1.0):
            raise ConfigError(f"need -1 <= t_neg < t_pos <= 1, got t_neg={self.t_neg} t_pos={self.t_pos}")
        if self.n_pixels < 2:
            raise ConfigError(f"n_pixels must be >= 2, got {self.n_pixels}")
        if self.m_prime < 1 or self.smooth_k < 1 or self.iters < 0:
            raise ConfigError("m_prime and smooth_k must be >= 1, iters >= 0")

    @staticmethod
    def monocular(**kw) -> "TrainConfig":
        return TrainConfig(n_pixels=5000, m_prime=25, **kw)

    @staticmethod
    def multiview(**kw) -> "TrainConfig":
        return TrainConfig(n_pixels=10000, m_prime=50, **kw)


PROFILES = {"monocular": TrainConfig.monocular, "multiview": TrainConfig.multiview}


@dataclass
class FeatureField:
    """N x 32 features plus the cached KNN index used for smoothing.

    Neighbor lists are computed once on canonical positions, have exactly
    min(K, N) entries, and always include the Gaussian itself, which makes
    the smoothing operator row-stochastic (uniform mean over the list).
    """

    features: np.ndarray  # (N, 32) float64
    smooth_k: int
    knn_index: np.ndarray  # (N, min(K, N)) int32

    def __post_init__(self):
        self._operator = None  # cached row-stochastic smoothing matrix

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def smoothing_operator(self):
        """Sparse N x N matrix whose row i averages features over KNN(i)."""
        if self._operator is None:
            import scipy.sparse as sp

            n, k_eff = self.knn_index.shape
            rows = np.repeat(np.arange(n, dtype=np.int64), k_eff)
            vals = np.full(n * k_eff, 1.0 / k_eff)
            self._operator = sp.csr_matrix(
                (vals, (rows, self.knn_index.ravel().astype(np.int64))), shape=(n, n))
        return self._operator

    @staticmethod
    def build(positions: np.ndarray, features: np.ndarray | None = None,
              smooth_k: int = 16, rng=None, init_std: float = 0.1) -> "FeatureField":
        positions = np.asarray(positions, dtype=np.float64)
        n = positions.shape[0]
        if features is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            features = rng.normal(0.0, init_std, size=(n, FEATURE_DIM))
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (n, FEATURE_DIM):
            raise ConfigError(f"features shape {features.shape} != ({n}, {FEATURE_DIM})")
        if smooth_k < 1:
            raise ConfigError(f"smooth_k must be >= 1, got {smooth_k}")
        knn = build_knn_index(positions, smooth_k)
        return FeatureField(features=features, smooth_k=smooth_k, knn_index=knn)

    def smooth(self) -> np.ndarray:
        return smooth_features(self)

    @staticmethod
    def from_scene(scene: DynamicScene, smooth_k: int = 16, rng=None) -> "FeatureField":
        return FeatureField.build(scene.gaussians.positions, scene.features, smooth_k, rng)


def build_knn_index(positions: np.ndarray, k: int) -> np.ndarray:
    """min(k, N) nearest neighbors per point (self always included)."""
    n = positions.shape[0]
    k_eff = min(k, n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k_eff)
    idx = np.atleast_2d(idx.astype(np.int32))
    if idx.shape != (n, k_eff):
        idx = idx.reshape(n, k_eff)
    rows = np.arange(n, dtype=np.int32)
    has_self = (idx == rows[:, None]).any(axis=1)
    # duplicate positions can displace the point itself from its own list
    idx[~has_self, -1] = rows[~has_self]
    return idx


def smooth_features(field: FeatureField) -> np.ndarray:
    """Row i = uniform mean of features over KNN(i)."""
    return field.smoothing_operator() @ field.features


def smoothing_transpose(field: FeatureField, grad: np.ndarray) -> np.ndarray:
    """Apply the transpose of the smoothing operator to a gradient array."""
    return field.smoothing_operator().T @ grad


# ---------------------------------------------------------------------------
# contrastive batch


@dataclass
class ContrastBatch:
    pixels: np.ndarray       # (P, 2) int (u, v)
    y: np.ndarray            # (P, M') uint8 pixel-mask correspondence rows
    corr: np.ndarray         # (P, P) bool mask-based correspondence matrix
    feats_raw: np.ndarray    # (P, 32) rendered features before normalization
    feats_norm: np.ndarray   # (P, 32) L2-normalized rows (zero rows stay zero)
    norms: np.ndarray        # (P,) row norms of feats_raw
    gram: np.ndarray         # (P, P) cosine Gram matrix

    @property
    def n_pixels(self) -> int:
        return len(self.pixels)


def sample_pixels(width: int, height: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n distinct (u, v) pixels drawn uniformly over the full image."""
    total = width * height
    if n > total:
        raise ValueError(f"cannot sample {n} distinct pixels from a {width}x{height} image")
    flat = rng.choice(total, size=n, replace=False)
    return np.stack([flat % width, flat // width], axis=1).astype(np.int64)


def normalize_rows(x: np.ndarray) -> tuple:
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms


def build_batch(ms: MaskSet, mask_idx: np.ndarray, render: RenderOutput,
                cfg: TrainConfig, rng: np.random.Generator | None = None) -> ContrastBatch:
    """Assemble correspondence and Gram matrices for one training step.

    The render must carry composited features (and weights) for the sampled
    pixels; if it was produced without a pixel subset, pixels are drawn here
    from rng and gathered out of the full feature image.
    """
    masks = ms.to_tensor()
    sel = masks[np.asarray(mask_idx, dtype=np.int64)]

    if render.pixels is not None:
        pixels = render.pixels
        if render.feature is None:
            raise ValueError("render carries no composited features for the sampled pixels")
        feats = render.feature
    else:
        if rng is None:
            raise ValueError("rng is required when the render does not carry a pixel subset")
        pixels = sample_pixels(render.width, render.height, cfg.n_pixels, rng)
        if render.feature is None:
            raise ValueError("render carries no composited feature image")
        feats = render.feature[pixels[:, 1], pixels[:, 0]]

    y = sel[:, pixels[:, 1], pixels[:, 0]].T.astype(np.uint8)  # (P, M')
    corr = (y.astype(np.int32) @ y.astype(np.int32).T) > 0

    feats = np.asarray(feats, dtype=np.float64)
    feats_norm, norms = normalize_rows(feats)
    gram = feats_norm @ feats_norm.T
    return ContrastBatch(pixels=pixels, y=y, corr=corr, feats_raw=feats,
                         feats_norm=feats_norm, norms=norms, gram=gram)


# ---------------------------------------------------------------------------
# loss and gradient


@lru_cache(maxsize=8)
def _upper_triangle(p: int) -> np.ndarray:
    mask = np.triu(np.ones((p, p), dtype=bool), k=1)
    mask.setflags(write=False)
    return mask


def loss_pmc(batch: ContrastBatch, cfg: TrainConfig) -> tuple:
    """Hard-pair contrastive loss and its gradient w.r.t. the Gram matrix.

    Over strict upper-triangular pairs: hard negatives are cross-mask pairs
    with similarity above t_neg, hard positives are same-mask pairs below
    t_pos. Loss = mean over hard negatives - mean over hard positives; an
    empty set contributes zero. The returned gradient is upper-triangular
    with entries +-1/K on the selected pairs.
    """
    p = batch.n_pixels
    upper = _upper_triangle(p)
    hard_neg = upper & ~batch.corr & (batch.gram > cfg.t_neg)
    hard_pos = upper & batch.corr & (batch.gram < cfg.t_pos)
    k_n = int(hard_neg.sum())
    k_p = int(hard_pos.sum())

    loss = 0.0
    grad = np.zeros((p, p))
    if k_n:
        loss += batch.gram[hard_neg].sum() / k_n
        grad[hard_neg] = 1.0 / k_n
    if k_p:
        loss -= batch.gram[hard_pos].sum() / k_p
        grad[hard_pos] -= 1.0 / k_p
    return float(loss), grad


def backprop_to_features(grad_gram: np.ndarray, batch: ContrastBatch,
                         weights: PixelWeights, field: FeatureField) -> np.ndarray:
    """Exact dLoss/dFeatures through Gram, row normalization, blend, smoothing.

    grad_gram is the upper-triangular gradient from loss_pmc; weights must be
    the blend weights recorded for exactly the batch pixels.
    """
    if weights.pixels is None:
        if weights.n_pixels != batch.n_pixels:
            raise ValueError("full-image weights passed for a pixel-subset batch")
    elif weights.n_pixels != batch.n_pixels or not np.array_equal(weights.pixels, batch.pixels):
        raise ValueError("recorded weights do not cover the batch pixels")

    sym = grad_gram + grad_gram.T
    d_norm = sym @ batch.feats_norm  # dLoss/d(normalized rows)

    # through v_hat = v / |v|: g -> (g - (g . v_hat) v_hat) / |v|
    safe = np.where(batch.norms > 0, batch.norms, 1.0)
    proj = np.sum(d_norm * batch.feats_norm, axis=1, keepdims=True)
    d_raw = (d_norm - proj * batch.feats_norm) / safe[:, None]
    d_raw[batch.norms == 0] = 0.0

    d_smooth = weights.to_csr().T @ d_raw  # (N, 32)
    return smoothing_transpose(field, d_smooth)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def like(x: np.ndarray) -> "AdamState":
        return AdamState(m=np.zeros_like(x), v=np.zeros_like(x))


def adam_step(x: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    state.m += (1.0 - cfg.beta1) * (grad - state.m)
    state.v += (1.0 - cfg.beta2) * (grad * grad - state.v)
    m_hat = state.m / (1.0 - cfg.beta1 ** state.step)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.step)
    x -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ---------------------------------------------------------------------------
# training loop


class _MaskSource:
    """Resolves manifest entries to decoded mask tensors with caching."""

    def __init__(self, entries):
        self.entries = list(entries)
        self._cache: dict = {}

    def __len__(self):
        return len(self.entries)

    def get(self, i: int) -> MaskSet:
        if i not in self._cache:
            e = self.entries[i]
            self._cache[i] = e if isinstance(e, MaskSet) else load_maskset(e.path)
        return self._cache[i]

    def meta(self, i: int):
        e = self.entries[i]
        if isinstance(e, MaskSet):
            return e.view_id, e.t
        return e.view_id, e.t


def train(scene: DynamicScene, manifest, cfg: TrainConfig,
          log_csv=None, field: FeatureField | None = None,
          progress=None) -> FeatureField:
    """Optimize the feature field against a mask dataset.

    manifest: a sequence of ManifestEntry or MaskSet objects covering the
    training (view, time) pairs. Returns the trained field; per-iteration
    losses are appended to log_csv when given.
    """
    cfg.validate()
    source = _MaskSource(manifest)
    if len(source) == 0:
        raise ConfigError("no training views: the mask manifest is empty")

    rng = np.random.default_rng(cfg.seed)
    if field is None:
        field = FeatureField.build(scene.gaussians.positions, None, cfg.smooth_k, rng)
    state = AdamState.like(field.features)

    cams = {c.id: c for c in scene.cameras}
    deformed_cache: dict = {}

    writer = None
    log_file = None
    if log_csv is not None:
        log_file = open(log_csv, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["iteration", "loss", "k_pos", "k_neg", "view_id", "t"])

    try:
        for it in range(cfg.iters):
            pick = int(rng.integers(len(source)))
            view_id, t = source.meta(pick)
            if view_id not in cams:
                raise ConfigError(f"mask manifest references unknown camera {view_id!r}")
            ms = source.get(pick)
            cam = cams[view_id]

            key = (view_id, float(t))
            if key not in deformed_cache:
                deformed_cache[key] = apply_deformation(scene, t)
            gs_t = deformed_cache[key]

            mask_idx = sample_masks(ms, cfg.m_prime, rng)
            pixels = sample_pixels(cam.width, cam.height, cfg.n_pixels, rng)
            smoothed = smooth_features(field)
            render = rasterize(gs_t, cam, payload=smoothed, want_weights=True,
                               pixel_subset=pixels, want_color=False, tile_size=32)
            batch = build_batch(ms, mask_idx, render, cfg)
            loss, grad_gram = loss_pmc(batch, cfg)
            grad = backprop_to_features(grad_gram, batch, render.weights, field)
            adam_step(field.features, grad, state, cfg)

            if writer is not None:
                k_n = int((np.triu(~batch.corr, 1) & np.triu(batch.gram > cfg.t_neg, 1)).sum())
                k_p = int((np.triu(batch.corr, 1) & np.triu(batch.gram < cfg.t_pos, 1)).sum())
                writer.writerow([it, repr(loss), k_p, k_n, view_id, t])
            if progress is not None:
                progress(it, loss)
    finally:
        if log_file is not None:
            log_file.close()
    return field


# ---------------------------------------------------------------------------
# visualization


def pca_compress(field: FeatureField) -> np.ndarray:
    """Project smoothed features onto their top-3 principal components.

    Each output channel is affinely mapped to [0, 1] so the result can be
    rendered directly as RGB.
    """
    x = smooth_features(field)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 Gaussians for a 3-component projection")
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:3].T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    span = hi - lo
    out = np.empty_like(proj)
    for c in range(3):
        if span[c] < 1e-12:
            out[:, c] = 0.5
        else:
            out[:, c] = (proj[:, c] - lo[c]) / span[c]
    return out
