import math

import numpy as np
import pytest

from campath.config import SiftParams, ViewGrid
from campath.errors import ImageTooSmall, NoMatches
from campath.features import (
    AffineView,
    FeatureSet,
    affine_features,
    affine_skew,
    as_image,
    detect_sift,
    load_image,
    match_arrays,
    match_asymmetric,
    save_image,
    simulate_affine_views,
    to_gray,
    view_parameters,
)
from campath.synth import TrajectorySpec, make_scene


@pytest.fixture(scope="module")
def textured():
    sc = make_scene(400, TrajectorySpec("static", steps=1), seed=11)
    return sc.render(1, "left")


def blob_image(cx=64.0, cy=64.0, sigma=4.0, size=128):
    y, x = np.mgrid[0:size, 0:size]
    return 0.2 + 0.6 * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))


class TestImages:
    def test_luma(self):
        rgb = np.zeros((2, 2, 3))
        rgb[..., 1] = 1.0
        np.testing.assert_allclose(to_gray(rgb), 0.587)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            as_image(np.full((40, 40), 1.5))

    def test_png_round_trip(self, tmp_path, textured):
        save_image(textured, tmp_path / "f.png")
        back = load_image(tmp_path / "f.png")
        assert back.shape == textured.shape
        assert np.abs(back - textured).max() <= 0.5 / 255 + 1e-12

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_image(tmp_path / "nope.png")


class TestDetect:
    def test_constant_image(self):
        assert len(detect_sift(np.full((100, 100), 0.5))) == 0

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            detect_sift(np.zeros((31, 64)))

    def test_single_blob(self):
        feats = detect_sift(blob_image())
        assert len(feats) >= 1
        d = np.linalg.norm(feats.points - [64, 64], axis=1)
        assert d.min() < 2.0

    def test_subpixel_blob_centre(self):
        feats = detect_sift(blob_image(60.3, 70.6))
        d = np.linalg.norm(feats.points - [60.3, 70.6], axis=1)
        assert d.min() < 0.2

    def test_descriptors_unit_norm(self, textured):
        feats = detect_sift(textured)
        assert len(feats) > 100
        np.testing.assert_allclose(np.linalg.norm(feats.descriptors, axis=1), 1.0, atol=1e-6)
        assert np.all(feats.descriptors >= 0)
        assert np.all(feats.scales > 0)
        h, w = textured.shape
        assert np.all((feats.points >= 0) & (feats.points < [w, h]))

    def test_deterministic(self, textured):
        a, b = detect_sift(textured), detect_sift(textured)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)

    def test_iteration_yields_keypoints(self, textured):
        feats = detect_sift(textured)
        kp, desc = feats[0]
        assert kp.pt == tuple(feats.points[0])
        assert desc.shape == (128,)

    def test_quarter_turn_rematch(self, textured):
        f1 = detect_sift(textured)
        f2 = detect_sift(np.rot90(textured))
        sim = f1.descriptors @ f2.descriptors.T
        dist = np.sqrt(np.maximum(2 - 2 * sim, 0))
        nn12 = dist.argmin(axis=1)
        nn21 = dist.argmin(axis=0)
        srt = np.sort(dist, axis=1)
        good = (nn21[nn12] == np.arange(len(f1))) & (srt[:, 0] < 0.8 * srt[:, 1])
        assert good.mean() >= 0.8


class TestViews:
    def test_grid_counts(self):
        assert len(view_parameters(15, 30, 60)) == 25
        assert len(view_parameters(15, 30, 45)) == 19
        assert view_parameters(15, 30, 0) == [(0.0, 0.0)]
        assert view_parameters()[0] == (0.0, 0.0)

    def test_uneven_steps(self):
        with pytest.raises(ValueError):
            view_parameters(14, 30, 45)

    def test_simulated_views_default_range(self):
        img = blob_image(size=64)
        views = simulate_affine_views(img)
        assert len(views) == 25
        assert views[0][1].tilt_deg == 0
        np.testing.assert_allclose(views[0][0], img, atol=1e-6)

    def test_original_corners_stay_on_canvas(self):
        h, w = 120, 160
        corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], float)
        for tilt, rot in view_parameters(15, 30, 60):
            sim, _, view = affine_skew(np.zeros((h, w)), tilt, rot)
            sh, sw = sim.shape
            A = np.vstack([view.map, [0, 0, 1]])
            fwd = corners @ np.linalg.inv(A)[:2, :2].T + np.linalg.inv(A)[:2, 2]
            assert np.all(fwd >= -1.0) and np.all(fwd <= [sw + 1.0, sh + 1.0])
            # the canvas never exceeds the rotated frame's bounding box
            assert math.hypot(sw, sh) <= math.hypot(w, h) * math.sqrt(2) + 4

    def test_map_tracks_blob(self):
        # a blob seen in every simulated view maps back onto itself
        img = blob_image(100.3, 90.6, 4.0, 200)
        for tilt, rot in view_parameters(15, 30, 30):
            sim, mask, view = affine_skew(img, tilt, rot)
            back = view.to_original(detect_sift(sim, mask=mask).points)
            assert np.linalg.norm(back - [100.3, 90.6], axis=1).min() < 0.1, (tilt, rot)

    def test_singular_map_rejected(self):
        with pytest.raises(ValueError):
            AffineView(0, 0, np.zeros((2, 3)))

    def test_identity_view_equals_plain_sift(self, textured):
        views = affine_features(textured, SiftParams(), ViewGrid(15, 30, 15))
        plain = detect_sift(textured)
        # the identity view goes through float32, so allow rounding-level shifts
        assert len(views[0].features) == len(plain)
        np.testing.assert_allclose(views[0].features.points, plain.points, atol=0.05)
        assert len(views) == 7


class TestMatching:
    def test_self_match(self, textured):
        f = detect_sift(textured)
        m = match_asymmetric(f, f)
        p1, p2 = match_arrays(m)
        assert len(m) >= 0.95 * len(f)
        assert np.all(p1 == p2)
        assert max(x.distance for x in m) < 1e-6

    def test_negative_control(self):
        rng = np.random.default_rng(0)
        noise = rng.uniform(0, 1, (200, 200))
        y, x = np.mgrid[0:200, 0:200]
        checker = (((x // 20) + (y // 20)) % 2).astype(float)
        try:
            m = match_asymmetric(detect_sift(noise), affine_features(checker))
        except NoMatches:
            return
        p1, p2 = match_arrays(m)
        # nothing real can correspond, so surviving matches must be few
        assert len(m) < 5 or np.median(np.linalg.norm(p1 - p2, axis=1)) > 10

    def test_empty_raises(self, textured):
        with pytest.raises(NoMatches):
            match_asymmetric(FeatureSet.empty(), detect_sift(textured))

    def test_asift_superset_of_sift(self):
        sc = make_scene(400, TrajectorySpec("arc", steps=2, step_deg=30), seed=5)
        a, b = sc.render(1, "left"), sc.render(2, "left")
        f1 = detect_sift(a)
        plain = match_asymmetric(f1, detect_sift(b))
        asift = match_asymmetric(f1, affine_features(b))
        assert len(asift) >= len(plain)

    def test_deterministic(self, textured):
        f = detect_sift(textured)
        views = affine_features(textured)
        assert match_asymmetric(f, views) == match_asymmetric(f, views)
