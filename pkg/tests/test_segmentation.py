import numpy as np
import pytest

from splatseg.errors import ConfigError, DegenerateClusteringError
from splatseg.feature_learn import FeatureField, smooth_features
from splatseg.oracles import oracle_dbscan
from splatseg.segmentation import (ClusterMap, SegConfig, cluster,
                                   dbscan_cosine, filter_cluster,
                                   render_segmentation, score)
from splatseg.scene import GaussianSet, DeformationTrack, DynamicScene
from conftest import make_camera, random_gaussians, single_gaussian, static_scene


def directional_features(rng, n_groups, per_group, spread=0.02):
    """Unit-norm feature blobs around n_groups nearly-orthogonal directions."""
    basis = np.linalg.qr(rng.normal(size=(32, 32)))[0][:, :n_groups].T
    feats, labels = [], []
    for g in range(n_groups):
        f = basis[g] + spread * rng.normal(size=(per_group, 32))
        feats.append(f)
        labels.append(np.full(per_group, g))
    return np.concatenate(feats), np.concatenate(labels)


def labels_equivalent(a, b):
    """True when two labelings agree up to a bijective relabeling (noise fixed)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    mapping = {}
    reverse = {}
    for x, y in zip(a, b):
        if (x == -1) != (y == -1):
            return False
        if x == -1:
            continue
        if mapping.setdefault(x, y) != y or reverse.setdefault(y, x) != x:
            return False
    return True


class TestDbscan:
    def test_two_far_blobs(self, rng):
        feats, gt = directional_features(rng, 2, 30)
        labels = dbscan_cosine(feats / np.linalg.norm(feats, axis=1, keepdims=True), 0.1, 5)
        assert len(set(labels.tolist())) == 2
        assert labels_equivalent(labels, gt)

    def test_identical_points_single_cluster(self):
        pts = np.tile(np.ones(8), (12, 1))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        labels = dbscan_cosine(pts, 0.05, 10)
        assert set(labels.tolist()) == {0}

    def test_isolated_point_is_noise(self, rng):
        feats, _ = directional_features(rng, 1, 20)
        lone = -feats[0:1]  # opposite direction: far in cosine distance
        pts = np.concatenate([feats, lone])
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        labels = dbscan_cosine(pts, 0.1, 5)
        assert labels[-1] == -1

    def test_matches_quadratic_oracle_on_random_instances(self, rng):
        for trial in range(10):
            n = 200
            k = int(rng.integers(2, 6))
            feats, _ = directional_features(rng, k, n // k, spread=rng.uniform(0.02, 0.3))
            feats = np.concatenate([feats, rng.normal(size=(20, 32))])
            unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
            eps = float(rng.uniform(0.05, 0.4))
            min_pts = int(rng.integers(3, 12))
            mine = dbscan_cosine(unit, eps, min_pts)
            ref = oracle_dbscan(feats, eps, min_pts, metric="cosine")
            assert labels_equivalent(mine, ref), f"trial {trial} diverged"


class TestCluster:
    def build_field(self, rng, n_groups=3, per_group=120):
        feats, gt = directional_features(rng, n_groups, per_group)
        pos = rng.normal(size=(len(feats), 3))
        field = FeatureField.build(pos, feats, smooth_k=1)
        return field, gt

    def test_separated_blobs_full_subsample(self, rng):
        field, gt = self.build_field(rng)
        cmap = cluster(field, SegConfig(eps=0.1, min_pts=5, subsample_frac=1.0), rng)
        assert cmap.n_clusters == 3
        assert labels_equivalent(cmap.labels, gt)
        assert np.all(cmap.labels >= 1)

    def test_propagation_keeps_sample_labels(self, rng):
        field, _ = self.build_field(rng)
        cfg = SegConfig(eps=0.1, min_pts=4, subsample_frac=0.25)
        cmap = cluster(field, cfg, np.random.default_rng(0))
        sub = cmap.sample_idx
        feats_norm = smooth_features(field)
        feats_norm = feats_norm / np.linalg.norm(feats_norm, axis=1, keepdims=True)
        ref = dbscan_cosine(feats_norm[sub], cfg.eps, cfg.min_pts)
        clustered = ref >= 0
        np.testing.assert_array_equal(cmap.labels[sub[clustered]], ref[clustered] + 1)

    def test_centroids_match_label_means(self, rng):
        field, _ = self.build_field(rng)
        cmap = cluster(field, SegConfig(eps=0.1, min_pts=4, subsample_frac=0.5), rng)
        sm = smooth_features(field)
        for c in range(1, cmap.n_clusters + 1):
            members = cmap.labels == c
            np.testing.assert_allclose(cmap.centroids[c - 1], sm[members].mean(0), atol=1e-6)

    def test_all_noise_raises(self, rng):
        feats = rng.normal(size=(80, 32))
        field = FeatureField.build(rng.normal(size=(80, 3)), feats, smooth_k=1)
        with pytest.raises(DegenerateClusteringError):
            cluster(field, SegConfig(eps=1e-4, min_pts=10, subsample_frac=1.0), rng)

    def test_untrained_field_rejected(self, rng):
        field = FeatureField.build(rng.normal(size=(20, 3)), np.zeros((20, 32)), smooth_k=1)
        with pytest.raises(ConfigError):
            cluster(field, SegConfig(), rng)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SegConfig(eps=0.0).validate()
        with pytest.raises(ConfigError):
            SegConfig(subsample_frac=0.0).validate()
        with pytest.raises(ConfigError):
            SegConfig(filter_t=1.5).validate()

    def test_map_round_trip(self, rng, tmp_path):
        field, _ = self.build_field(rng)
        cmap = cluster(field, SegConfig(eps=0.1, min_pts=4, subsample_frac=0.5), rng)
        path = tmp_path / "map.sadgmap"
        cmap.save(path)
        loaded = ClusterMap.load(path)
        np.testing.assert_array_equal(loaded.labels, cmap.labels)
        assert loaded.n_clusters == cmap.n_clusters
        np.testing.assert_allclose(loaded.centroids, cmap.centroids, atol=1e-6)
        np.testing.assert_array_equal(loaded.sample_idx, cmap.sample_idx)


class TestFilter:
    def noisy_map(self, rng):
        feats, gt = directional_features(rng, 2, 60)
        pos = rng.normal(size=(len(feats), 3))
        field = FeatureField.build(pos, feats, smooth_k=1)
        cmap = cluster(field, SegConfig(eps=0.2, min_pts=5, subsample_frac=1.0), rng)
        return field, cmap

    def test_vacuous_threshold_is_identity(self, rng):
        field, cmap = self.noisy_map(rng)
        out = filter_cluster(cmap, field, 1, -1.0)
        np.testing.assert_array_equal(out.labels, cmap.labels)

    def test_membership_never_grows(self, rng):
        field, cmap = self.noisy_map(rng)
        for t in (-1.0, 0.0, 0.8, 0.99):
            out = filter_cluster(cmap, field, 1, t)
            before = set(np.flatnonzero(cmap.labels == 1).tolist())
            after = set(np.flatnonzero(out.labels == 1).tolist())
            assert after <= before

    def test_above_one_clamped(self, rng):
        field, cmap = self.noisy_map(rng)
        a = filter_cluster(cmap, field, 1, 1.0)
        b = filter_cluster(cmap, field, 1, 1.0 + 1e-6)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_outliers_dropped_and_centroid_recomputed(self, rng):
        feats = np.zeros((30, 32))
        feats[:, 0] = 1.0
        feats[25:] = 0.0
        feats[25:, 1] = 1.0  # orthogonal outliers stuck in the same cluster
        field = FeatureField.build(rng.normal(size=(30, 3)), feats, smooth_k=1)
        labels = np.ones(30, dtype=np.int32)
        centroids = feats.mean(0, keepdims=True)
        cmap = ClusterMap(labels=labels, n_clusters=1, centroids=centroids,
                          sample_idx=np.arange(30))
        out = filter_cluster(cmap, field, 1, 0.8)
        assert set(np.flatnonzero(out.labels == 0).tolist()) == set(range(25, 30))
        np.testing.assert_allclose(out.centroids[0], feats[:25].mean(0), atol=1e-12)


class TestRenderSegmentation:
    def one_object_scene(self):
        cam = make_camera(width=32, height=32)
        gs = single_gaussian((0.0, 0.0, 3.0), opacity=0.98, sigma=0.35)
        scene = static_scene(gs, [cam])
        cmap = ClusterMap(labels=np.array([1], dtype=np.int32), n_clusters=1,
                          centroids=np.ones((1, 32)), sample_idx=np.array([0]))
        return scene, cmap, cam

    def test_selected_object_mask_is_alpha_majority(self):
        from splatseg.rasterizer import rasterize
        from splatseg.scene import apply_deformation
        scene, cmap, cam = self.one_object_scene()
        mask = render_segmentation(scene, cmap, cam, 0.0, selection={1})
        alpha = rasterize(apply_deformation(scene, 0.0), cam, want_color=False).alpha
        np.testing.assert_array_equal(mask, alpha > 0.5 * alpha)

    def test_empty_selection_gives_empty_mask(self):
        scene, cmap, cam = self.one_object_scene()
        mask = render_segmentation(scene, cmap, cam, 0.0, selection=set())
        assert mask.dtype == bool and not mask.any()

    def test_label_image_zero_on_empty_pixels(self):
        scene, cmap, cam = self.one_object_scene()
        labels = render_segmentation(scene, cmap, cam, 0.0)
        from splatseg.rasterizer import rasterize
        from splatseg.scene import apply_deformation
        alpha = rasterize(apply_deformation(scene, 0.0), cam, want_color=False).alpha
        assert np.all(labels[alpha == 0] == 0)
        assert np.all(labels[alpha > 0.5] == 1)


class TestScore:
    def test_perfect_prediction(self, rng):
        gt = rng.random((3, 2, 8, 8)) < 0.3
        assert score(gt, gt) == (1.0, 1.0)

    def test_disjoint_equal_areas(self):
        pred = np.zeros((1, 1, 2, 2), dtype=bool)
        gt = np.zeros_like(pred)
        pred[0, 0, 0, 0] = True
        gt[0, 0, 1, 1] = True
        miou, macc = score(pred, gt)
        assert miou == 0.0
        assert macc == 0.5

    def test_half_overlapping_squares(self):
        pred = np.zeros((1, 1, 4, 8), dtype=bool)
        gt = np.zeros_like(pred)
        pred[0, 0, :, 0:4] = True
        gt[0, 0, :, 2:6] = True
        miou, _ = score(pred, gt)
        assert miou == pytest.approx(1.0 / 3.0)

    def test_empty_vs_empty_is_one(self):
        pred = np.zeros((2, 1, 4, 4), dtype=bool)
        gt = np.zeros_like(pred)
        assert score(pred, gt) == (1.0, 1.0)

    def test_frame_order_symmetry_and_relabeling(self, rng):
        pred = rng.random((4, 3, 8, 8)) < 0.4
        gt = rng.random((4, 3, 8, 8)) < 0.4
        base = score(pred, gt)
        perm_frames = rng.permutation(4)
        assert score(pred[perm_frames], gt[perm_frames]) == pytest.approx(base)
        perm_obj = rng.permutation(3)
        assert score(pred[:, perm_obj], gt[:, perm_obj]) == pytest.approx(base)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            score(np.zeros((1, 1, 4, 4), dtype=bool), np.zeros((1, 1, 5, 4), dtype=bool))
