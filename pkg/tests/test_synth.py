import json

import numpy as np
import pytest

from campath.epipolar import epipolar_residual, fundamental_from_pose
from campath.errors import NoVisiblePoints
from campath.geom import Pose
from campath.synth import (
    SyntheticScene,
    TrajectorySpec,
    contaminate,
    exact_correspondences,
    load_scene_spec,
    make_scene,
    render_sequence,
)


def test_static_frames_identical():
    seq = render_sequence(make_scene(150, TrajectorySpec("static", steps=3), seed=1))
    assert seq.left[0].tobytes() == seq.left[1].tobytes() == seq.left[2].tobytes()
    assert seq.right[0].tobytes() == seq.right[2].tobytes()


def test_pinhole_projection():
    sc = make_scene(20, TrajectorySpec("line", steps=3, step_mm=25), seed=2)
    sc.points = np.array([[100.0, -50.0, 1000.0]] * 20)
    px, z, _ = sc.project(3, "left")
    # camera centre at x = 50 mm, identity orientation: u = 600 * 50 / 1000 + 320
    np.testing.assert_allclose(px[0], [350.0, 210.0])
    assert z[0] == 1000.0
    pr, _, _ = sc.project(3, "right")
    np.testing.assert_allclose(pr[0], [600 * (50 - 47.917) / 1000 + 320, 210.0])


def test_disparity_is_f_b_over_z():
    sc = make_scene(200, TrajectorySpec("arc", steps=2, step_deg=10), seed=3)
    for p in (1, 2):
        l, r, ids = exact_correspondences(sc, p, p, "left", camera2="right")
        z = sc.camera_points(p, "left")[ids, 2]
        np.testing.assert_allclose(l[:, 0] - r[:, 0], 600 * 47.917 / z, rtol=1e-12)


def test_rendered_blob_peaks_at_projection():
    sc = make_scene(1, TrajectorySpec("static", steps=1), seed=4, blobs_per_sprite=1)
    sc.points = np.array([[0.0, 0.0, 1000.0]])
    sc.sprite_amplitudes = np.array([[0.4]])
    img = sc.render(1)
    assert np.unravel_index(np.argmax(img), img.shape) == (240, 320)


class TestExactCorrespondences:
    def test_same_position(self):
        sc = make_scene(200, TrajectorySpec("line", steps=3), seed=5)
        a, b, _ = exact_correspondences(sc, 2, 2)
        np.testing.assert_array_equal(a, b)

    def test_horizontal_translation(self):
        sc = make_scene(200, TrajectorySpec("line", steps=2, step_mm=30), seed=6)
        a, b, _ = exact_correspondences(sc, 1, 2)
        np.testing.assert_allclose(a[:, 1], b[:, 1], atol=1e-12)
        assert np.all(b[:, 0] < a[:, 0])

    def test_epipolar_identity(self):
        sc = make_scene(300, TrajectorySpec("arc", steps=3, step_deg=7), seed=7)
        a, b, _ = exact_correspondences(sc, 1, 3)
        P1, P3 = sc.pose(1), sc.pose(3)
        # motion x3 = R x1 + t between the two camera frames
        R = P3.rotation.T @ P1.rotation
        t = (P1.translation - P3.translation) @ P3.rotation
        F = fundamental_from_pose(R, t, sc.rig.left.K, sc.rig.left.K)
        assert np.abs(epipolar_residual(F, a, b)).max() < 1e-12


def test_deterministic_per_seed():
    a = make_scene(100, TrajectorySpec("line", steps=2), seed=8, noise_sigma=0.5, outlier_fraction=0.1)
    b = make_scene(100, TrajectorySpec("line", steps=2), seed=8, noise_sigma=0.5, outlier_fraction=0.1)
    assert a.render(2, "right").tobytes() == b.render(2, "right").tobytes()
    c = make_scene(100, TrajectorySpec("line", steps=2), seed=9)
    assert not np.array_equal(a.points, c.points)


def test_noise_moves_projections():
    sc = make_scene(300, TrajectorySpec("static", steps=2), seed=10, noise_sigma=0.5)
    a, b, _ = exact_correspondences(sc, 1, 2, noisy=True)
    d = (a - b).ravel()
    assert 0.5 < d.std() < 0.9   # difference of two sigma-0.5 draws


def test_contaminate_respects_floor():
    sc = make_scene(150, TrajectorySpec("line", steps=2, step_mm=40), seed=11)
    a, b, _ = exact_correspondences(sc, 1, 2)
    F = fundamental_from_pose(np.eye(3), np.array([-40.0, 0, 0]), sc.rig.left.K, sc.rig.left.K)
    q1, q2, bad = contaminate(a, b, F, 30, (640, 480), np.random.default_rng(0))
    from campath.epipolar import sampson_distance
    assert bad.sum() == 30 and len(q1) == len(a) + 30
    assert sampson_distance(F, q1[bad], q2[bad]).min() >= 3.0


def test_sequence_ground_truth():
    sc = make_scene(100, TrajectorySpec("line", steps=4, step_mm=25), seed=12)
    seq = render_sequence(sc, frame_dt=0.5)
    np.testing.assert_array_equal(seq.frame_times, [0, 0.5, 1.0, 1.5])
    assert seq.gt_samples.shape == (151, 4)
    np.testing.assert_allclose(seq.gt_samples[-1], [1.5, 75, 0, 0])
    assert isinstance(seq.ground_truth[0], Pose)


def test_scene_spec(tmp_path):
    spec = {"points": 50, "seed": 3, "trajectory": {"type": "square-loop", "steps": 9, "side_mm": 100},
            "noise": {"sigma_px": 0.25}}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    sc = load_scene_spec(tmp_path / "s.json")
    assert sc.trajectory.kind == "square" and len(sc.points) == 50 and sc.noise_sigma == 0.25
    np.testing.assert_allclose(sc.pose(9).translation, 0, atol=1e-12)
    np.testing.assert_allclose(sc.pose(3).translation, [100, 0, 0])


def test_no_visible_points():
    base = make_scene(5, seed=0)
    with pytest.raises(NoVisiblePoints):
        SyntheticScene(np.array([[0, 0, -100.0]]), base.sprite_offsets[:1], base.sprite_amplitudes[:1],
                       base.sprite_radii[:1])
    sc = make_scene(5, seed=0)
    sc.points = np.array([[1e5, 0, 10.0]] * 5)
    with pytest.raises(NoVisiblePoints):
        render_sequence(sc, 2)
