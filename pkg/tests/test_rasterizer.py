import numpy as np
import pytest

from splatseg.oracles import oracle_render
from splatseg.rasterizer import (ColorLossConfig, color_loss, rasterize,
                                 save_png, save_raw_f32, ssim)
from splatseg.scene import inverse_sigmoid
from conftest import make_camera, random_gaussians, single_gaussian


def center_gaussian(cam, opacity, z, sigma=0.4):
    """A splat whose center projects exactly onto a pixel center."""
    u = cam.width // 2
    v = cam.height // 2
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return single_gaussian((x, y, z), opacity=opacity, sigma=sigma), (u, v)


class TestSingleContributors:
    def test_single_opaque_gaussian_feature_and_depth(self):
        cam = make_camera(width=32, height=32)
        gs, (u, v) = center_gaussian(cam, opacity=0.99, z=3.0, sigma=1.0)
        payload = np.arange(32, dtype=np.float64).reshape(1, 32)
        out = rasterize(gs, cam, payload=payload, want_weights=True)
        # alpha is clipped at 0.99, so the single blend weight is 0.99
        np.testing.assert_allclose(out.feature[v, u], 0.99 * payload[0], atol=1e-9)
        np.testing.assert_allclose(out.depth[v, u], 3.0, atol=1e-4)
        idx, w = out.weights.row(v * cam.width + u)
        assert list(idx) == [0]
        np.testing.assert_allclose(w, [0.99], atol=1e-12)

    def test_two_gaussians_half_opacity_weights(self):
        cam = make_camera(width=32, height=32)
        front, (u, v) = center_gaussian(cam, opacity=0.5, z=2.0)
        back, _ = center_gaussian(cam, opacity=0.5, z=4.0)
        gs = front
        from splatseg.scene import GaussianSet
        gs = GaussianSet.concatenate(front, back)
        payload = np.array([[1.0] + [0.0] * 31, [0.0, 1.0] + [0.0] * 30])
        out = rasterize(gs, cam, payload=payload, want_weights=True)
        idx, w = out.weights.row(v * cam.width + u)
        np.testing.assert_allclose(w, [0.5, 0.25], atol=1e-9)
        np.testing.assert_allclose(out.feature[v, u][:2], [0.5, 0.25], atol=1e-9)

    def test_empty_scene_gives_background(self):
        from splatseg.scene import GaussianSet
        cam = make_camera(width=8, height=8)
        empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                            np.zeros(0), np.zeros((0, 48)))
        out = rasterize(empty, cam, background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(out.color, np.broadcast_to([0.2, 0.4, 0.6], (8, 8, 3)))
        assert np.all(np.isinf(out.depth))
        assert np.all(out.alpha == 0)


class TestOracleEquivalence:
    def test_matches_brute_force_on_random_scenes(self, rng):
        cam = make_camera(width=40, height=36)
        for trial in range(3):
            gs = random_gaussians(rng, 50)
            payload = rng.normal(size=(50, 4))
            tiled = rasterize(gs, cam, payload=payload, want_weights=True)
            ref = oracle_render(gs, cam, payload=payload)
            assert np.abs(tiled.color - ref.color).max() <= 1e-5
            assert np.abs(tiled.alpha - ref.alpha).max() <= 1e-5
            assert np.abs(tiled.feature - ref.feature).max() <= 1e-5
            both = np.isfinite(tiled.depth) & np.isfinite(ref.depth)
            assert both.sum() > 0
            assert np.abs(tiled.depth[both] - ref.depth[both]).max() <= 1e-4
            assert (np.isfinite(tiled.depth) == np.isfinite(ref.depth)).all()

    def test_weight_sum_equals_alpha(self, rng):
        cam = make_camera(width=40, height=36)
        gs = random_gaussians(rng, 60)
        out = rasterize(gs, cam, want_weights=True)
        sums = np.add.reduceat(np.append(out.weights.w, 0.0), out.weights.ptr[:-1])
        sums[np.diff(out.weights.ptr) == 0] = 0.0
        np.testing.assert_allclose(sums.reshape(36, 40), out.alpha, atol=1e-5)
        assert out.weights.w.min() >= 0.0
        assert out.weights.w.max() <= 1.0
        assert sums.max() <= 1.0 + 1e-9

    def test_tile_size_independence(self, rng):
        cam = make_camera(width=40, height=36)
        gs = random_gaussians(rng, 40)
        ref = rasterize(gs, cam, tile_size=16)
        for ts in (8, 32):
            out = rasterize(gs, cam, tile_size=ts)
            assert np.abs(out.color - ref.color).max() <= 1e-6
            assert np.abs(out.alpha - ref.alpha).max() <= 1e-6

    def test_front_to_back_alpha_monotone(self, rng):
        cam = make_camera(width=24, height=24)
        gs = random_gaussians(rng, 30, opacity_range=(0.5, 0.99))
        out = rasterize(gs, cam, want_weights=True)
        for p in range(out.weights.n_pixels):
            _, w = out.weights.row(p)
            if len(w):
                acc = np.cumsum(w)
                assert np.all(np.diff(acc) >= -1e-15)
                assert acc[-1] <= 1.0 + 1e-12

    def test_feature_equals_weights_dot_payload(self, rng):
        cam = make_camera(width=24, height=24)
        gs = random_gaussians(rng, 30)
        payload = rng.normal(size=(30, 32))
        out = rasterize(gs, cam, payload=payload, want_weights=True)
        recomposed = (out.weights.to_csr() @ payload).reshape(24, 24, 32)
        np.testing.assert_allclose(out.feature, recomposed, atol=1e-6)


class TestPixelSubset:
    def test_subset_matches_full_render(self, rng):
        cam = make_camera(width=32, height=28)
        gs = random_gaussians(rng, 45)
        payload = rng.normal(size=(45, 8))
        full = rasterize(gs, cam, payload=payload, want_weights=True)
        pixels = np.stack([rng.integers(0, 32, 60), rng.integers(0, 28, 60)], axis=1)
        sub = rasterize(gs, cam, payload=payload, want_weights=True, pixel_subset=pixels)
        for i, (u, v) in enumerate(pixels):
            np.testing.assert_allclose(sub.feature[i], full.feature[v, u], atol=1e-12)
            np.testing.assert_allclose(sub.alpha[i], full.alpha[v, u], atol=1e-12)
            si, sw = sub.weights.row(i)
            fi, fw = full.weights.row(v * cam.width + u)
            np.testing.assert_array_equal(si, fi)
            np.testing.assert_allclose(sw, fw, atol=1e-15)

    def test_payload_row_mismatch_rejected(self, rng):
        cam = make_camera()
        gs = random_gaussians(rng, 10)
        with pytest.raises(ValueError):
            rasterize(gs, cam, payload=np.zeros((9, 32)))


# direct per-window SSIM used as the independent reference
def ssim_reference(a, b, size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g1 = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, ch = a.shape
    vals = []
    for c in range(ch):
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                pa = a[i:i + size, j:j + size, c]
                pb = b[i:i + size, j:j + size, c]
                mu_a = (win * pa).sum()
                mu_b = (win * pb).sum()
                va = (win * pa * pa).sum() - mu_a ** 2
                vb = (win * pb * pb).sum() - mu_b ** 2
                cov = (win * pa * pb).sum() - mu_a * mu_b
                vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                            / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestColorLoss:
    def test_identical_images_zero(self, rng):
        img = rng.random((16, 16, 3))
        assert color_loss(img, img) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        a = np.full((8, 8, 3), 0.25)
        b = np.full((8, 8, 3), 0.5)
        assert color_loss(a, b, ColorLossConfig(lambda_dssim=0.0)) == pytest.approx(0.25)

    def test_ssim_matches_direct_reference(self, rng):
        a = rng.random((18, 20, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-6)
        loss = color_loss(a, b, ColorLossConfig(lambda_dssim=1.0))
        assert loss == pytest.approx((1 - ssim_reference(a, b)) / 2, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            color_loss(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


class TestExport:
    def test_png_and_raw_round_trip(self, rng, tmp_path):
        from PIL import Image

        img = rng.random((12, 10, 3))
        save_png(img, tmp_path / "img.png")
        back = np.asarray(Image.open(tmp_path / "img.png"))
        assert back.shape == (12, 10, 3)
        assert np.abs(back / 255.0 - img).max() < 1.0 / 255.0 + 1e-9

        depth = rng.random((12, 10)).astype(np.float32)
        save_raw_f32(depth, tmp_path / "depth.raw")
        raw = np.frombuffer((tmp_path / "depth.raw").read_bytes(), dtype="<f4").reshape(12, 10)
        np.testing.assert_array_equal(raw, depth)
        import json
        sidecar = json.loads((tmp_path / "depth.raw.json").read_text())
        assert sidecar["height"] == 12 and sidecar["width"] == 10 and sidecar["channels"] == 1
