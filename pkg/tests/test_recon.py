import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from campath.errors import BehindCamera, DegenerateBaseline, EmptyModel, SingularNormalEquations
from campath.geom import Pose, Trajectory, exp_so3, rot_y
from campath.recon import (
    BundleProblem,
    Observation,
    PointCloud,
    build_model,
    bundle_adjust,
    export_ply,
    jacobian,
    project,
    reprojection_error,
    triangulate_pair,
    view_pairs,
    write_ba_log,
)
from campath.stereo import CameraIntrinsics, depth_from_disparity, disparity
from campath.synth import TrajectorySpec, default_rig, make_scene

CAM = CameraIntrinsics(600.0, 600.0, 320.0, 240.0)


def ba_setup(seed=0, n=120, n_poses=4):
    rng = np.random.default_rng(seed)
    poses = [Pose(i + 1, rot_y(math.radians(3 * i)), np.array([40.0 * i, 5.0 * i, 0])) for i in range(n_poses)]
    X = np.c_[rng.uniform(-400, 400, (n, 2)), rng.uniform(900, 1600, n)]
    obs = [Observation(pid, p.position_index, tuple(project(p, CAM, x)[0]))
           for pid, x in enumerate(X) for p in poses]
    return poses, X, obs, rng


class TestTriangulate:
    def test_matches_stereo_depth(self):
        rig = default_rig()
        left = Pose(1, np.eye(3), np.zeros(3))
        right = Pose(2, np.eye(3), np.array([47.917, 0, 0]))
        X = np.array([[120.0, -40.0, 1337.0], [-300, 90, 2500.0]])
        xl, xr = project(left, CAM, X), project(right, CAM, X)
        got = triangulate_pair(xl, xr, left, right, CAM)
        z = [depth_from_disparity(disparity(a[0], b[0]), rig) for a, b in zip(xl, xr)]
        np.testing.assert_allclose(got[:, 2], z, rtol=1e-6)
        np.testing.assert_allclose(got, X, rtol=1e-9)

    def test_point_grid(self):
        p1 = Pose(1, np.eye(3), np.zeros(3))
        p2 = Pose(2, rot_y(math.radians(-8)), np.array([150.0, 10, -20]))
        g = np.stack(np.meshgrid(np.linspace(-200, 200, 5), np.linspace(-150, 150, 4), [1000, 1800]), -1).reshape(-1, 3)
        got = triangulate_pair(project(p1, CAM, g), project(p2, CAM, g), p1, p2, CAM)
        np.testing.assert_allclose(got, g, atol=1e-6)

    def test_single_point_shape(self):
        p1 = Pose(1, np.eye(3), np.zeros(3))
        p2 = Pose(2, np.eye(3), np.array([50.0, 0, 0]))
        X = np.array([10.0, 20, 900])
        got = triangulate_pair(project(p1, CAM, X)[0], project(p2, CAM, X)[0], p1, p2, CAM)
        assert got.shape == (3,)

    def test_same_pose(self):
        p = Pose(1, np.eye(3), np.zeros(3))
        with pytest.raises(DegenerateBaseline):
            triangulate_pair([[320, 240]], [[320, 240]], p, Pose(2, np.eye(3), [0.5, 0, 0]), CAM)

    def test_behind(self):
        p1 = Pose(1, np.eye(3), np.zeros(3))
        p2 = Pose(2, np.eye(3), np.array([50.0, 0, 0]))
        # rays diverge, so they meet behind both cameras
        with pytest.raises(BehindCamera):
            triangulate_pair([[320, 240]], [[340, 240]], p1, p2, CAM)


@pytest.mark.parametrize("n", [1, 2, 5, 12])
def test_view_pair_count(n):
    pairs = view_pairs(n)
    assert len(pairs) == n * (n - 1) // 2
    assert all(u < v for u, v in pairs)


class TestReprojectionError:
    def test_three_four_five(self):
        p = Pose(1, np.eye(3), np.zeros(3))
        X = np.array([[0.0, 0.0, 1000.0]])
        prob = BundleProblem([p], PointCloud([7], X), [Observation(7, 1, (323.0, 244.0))], CAM)
        total, res = reprojection_error(prob)
        assert total == pytest.approx(25.0)
        np.testing.assert_allclose(res, [[-3, -4]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_naive_double_sum(self, seed):
        poses, X, obs, rng = ba_setup(seed, n=10, n_poses=3)
        noisy = [Observation(o.point_id, o.frame_index, tuple(np.array(o.pixel) + rng.normal(0, 2, 2))) for o in obs]
        prob = BundleProblem(poses, PointCloud(np.arange(10), X), noisy, CAM)
        naive = 0.0
        for o in noisy:
            p = poses[o.frame_index - 1]
            Xc = p.rotation.T @ (X[o.point_id] - p.translation)
            u = 600 * Xc[0] / Xc[2] + 320
            v = 600 * Xc[1] / Xc[2] + 240
            naive += (u - o.pixel[0]) ** 2 + (v - o.pixel[1]) ** 2
        assert reprojection_error(prob)[0] == pytest.approx(naive, rel=1e-10)

    def test_unknown_frame(self):
        with pytest.raises(ValueError):
            BundleProblem([Pose(1, np.eye(3), np.zeros(3))], PointCloud([0], [[0, 0, 1000.0]]),
                          [Observation(0, 2, (1.0, 1.0))], CAM)


class TestBundleAdjust:
    def test_ground_truth_is_fixed_point(self):
        poses, X, obs, _ = ba_setup()
        out = bundle_adjust(BundleProblem(poses, PointCloud(np.arange(len(X)), X), obs, CAM))
        assert out.log[-1][2] < 1e-12
        np.testing.assert_allclose(out.points.xyz, X, atol=1e-9)

    def test_perturb_and_recover(self):
        poses, X, obs, rng = ba_setup(1)
        start = BundleProblem(poses, PointCloud(np.arange(len(X)), X + rng.normal(0, 5, X.shape)), obs, CAM)
        out = bundle_adjust(start)
        errs = [e for _, _, e in out.log]
        assert errs[0] > 1.0 and errs[-1] < 1e-6
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        np.testing.assert_allclose(out.points.xyz, X, atol=1e-6)

    def test_refine_poses(self):
        poses, X, obs, rng = ba_setup(2)
        moved = [poses[0]] + [Pose(p.position_index, p.rotation @ exp_so3(rng.normal(0, 1e-3, 3)),
                                   p.translation + rng.normal(0, 1, 3)) for p in poses[1:]]
        start = BundleProblem(moved, PointCloud(np.arange(len(X)), X + rng.normal(0, 2, X.shape)), obs, CAM)
        out = bundle_adjust(start, refine_poses=True)
        assert out.log[-1][2] < 1e-3 * out.log[0][2]
        np.testing.assert_array_equal(out.poses[0].rotation, poses[0].rotation)

    @pytest.mark.parametrize("refine_poses", [False, True])
    def test_jacobian_finite_differences(self, refine_poses):
        poses, X, obs, rng = ba_setup(3, n=15)
        prob = BundleProblem(poses, PointCloud(np.arange(15), X + rng.normal(0, 3, X.shape)), obs, CAM)
        J = jacobian(prob, refine_poses).toarray()
        Jn = np.zeros_like(J)

        def residuals(ps, xyz):
            return reprojection_error(BundleProblem(ps, PointCloud(np.arange(15), xyz), obs, CAM))[1].ravel()

        col = 0
        if refine_poses:
            for k in range(1, len(poses)):
                for j in range(6):
                    h = 1e-6 if j < 3 else 1e-4
                    out = []
                    for s in (h, -h):
                        d = np.zeros(6)
                        d[j] = s
                        p = poses[k]
                        q = Pose(p.position_index, p.rotation @ exp_so3(d[:3]), p.translation + d[3:])
                        out.append(residuals(poses[:k] + [q] + poses[k + 1:], prob.points.xyz))
                    Jn[:, col] = (out[0] - out[1]) / (2 * h)
                    col += 1
        for i in range(15):
            for j in range(3):
                out = []
                for s in (1e-4, -1e-4):
                    xyz = prob.points.xyz.copy()
                    xyz[i, j] += s
                    out.append(residuals(poses, xyz))
                Jn[:, col] = (out[0] - out[1]) / 2e-4
                col += 1
        assert np.abs(J - Jn).max() / np.abs(Jn).max() < 1e-5

    def test_single_view_point_is_singular(self):
        poses, X, obs, _ = ba_setup(4, n=5)
        obs = [o for o in obs if o.point_id != 3 or o.frame_index == 1]
        with pytest.raises(SingularNormalEquations) as e:
            bundle_adjust(BundleProblem(poses, PointCloud(np.arange(5), X), obs, CAM))
        assert e.value.point_ids == [3]

    def test_log_file(self, tmp_path):
        poses, X, obs, rng = ba_setup(5, n=20)
        out = bundle_adjust(BundleProblem(poses, PointCloud(np.arange(20), X + 1.0), obs, CAM))
        write_ba_log(out, tmp_path / "ba.csv")
        lines = (tmp_path / "ba.csv").read_text().splitlines()
        assert lines[0] == "iter,lambda,error" and len(lines) == len(out.log) + 1


class TestPly:
    def test_single_point(self, tmp_path):
        export_ply(PointCloud([0], [[1.0, 2.0, 3.0]]), tmp_path / "a.ply")
        text = (tmp_path / "a.ply").read_text().splitlines()
        assert text[-1] == "1 2 3"
        assert "element vertex 1" in text

    def test_empty(self, tmp_path):
        with pytest.raises(EmptyModel):
            export_ply(PointCloud([], np.zeros((0, 3))), tmp_path / "a.ply")
        assert not (tmp_path / "a.ply").exists()

    def test_reader_round_trip(self, tmp_path):
        plyfile = pytest.importorskip("plyfile")
        rng = np.random.default_rng(0)
        xyz = rng.normal(0, 500, (30, 3))
        cols = rng.integers(0, 256, (30, 3))
        export_ply(PointCloud(np.arange(30), xyz, cols), tmp_path / "c.ply")
        v = plyfile.PlyData.read(str(tmp_path / "c.ply"))["vertex"]
        np.testing.assert_array_equal(np.c_[v["x"], v["y"], v["z"]], xyz)
        np.testing.assert_array_equal(np.c_[v["red"], v["green"], v["blue"]], cols)


@pytest.fixture(scope="module")
def line_scene():
    sc = make_scene(300, TrajectorySpec("line", steps=3, step_mm=40), seed=6)
    return sc, [sc.render(p) for p in (1, 2, 3)]


@pytest.mark.slow
class TestBuildModel:
    def test_points_sit_on_sprites(self, line_scene):
        sc, frames = line_scene
        prob = build_model(frames, sc.ground_truth(3), sc.rig.left)
        assert len(prob.points) >= 100
        from scipy.spatial import cKDTree
        d = cKDTree(sc.blob_points()).query(prob.points.xyz)[0]
        assert np.median(d) < 3.0
        # observations reproject within the merge radius by construction
        _, res = reprojection_error(prob)
        assert np.linalg.norm(res, axis=1).max() <= 2.0

    def test_pair_order_invariant(self, line_scene):
        sc, frames = line_scene
        a = build_model(frames, sc.ground_truth(3), sc.rig.left)
        b = build_model(frames, sc.ground_truth(3), sc.rig.left, pairs=[(2, 3), (1, 3), (1, 2)])
        np.testing.assert_allclose(np.sort(a.points.xyz, axis=0), np.sort(b.points.xyz, axis=0), atol=1e-9)

    def test_textureless(self):
        flat = [np.full((240, 320), 0.5)] * 2
        traj = Trajectory([Pose(1, np.eye(3), np.zeros(3)), Pose(2, np.eye(3), [30.0, 0, 0])])
        with pytest.raises(EmptyModel):
            build_model(flat, traj, CAM)
