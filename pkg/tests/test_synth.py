import math

import numpy as np
import pytest

from wassmap.geometry import Pose, Rotation
from wassmap.keyframe import KeyframeSelector, SelectorConfig
from wassmap.synth import (
    NoiseModel,
    Patch,
    ScanSpec,
    Scene,
    build_session_graph,
    compose_odometry,
    corridor_path,
    generate_scene,
    generate_two_session,
    loop_path,
    perturb_pose,
    relative_noise,
    simulate_scan,
)


class TestScenes:
    def test_corridor_patch_census(self):
        scene = generate_scene("corridor", (40.0, 4.0, 3.0))
        assert len(scene.patches) == 6
        # 4 walls stand vertical (zero z-extent in one edge vector), plus
        # horizontal floor and ceiling
        vertical = [p for p in scene.patches if p.u[2] != 0 or p.v[2] != 0]
        horizontal = [p for p in scene.patches if p.u[2] == 0 and p.v[2] == 0]
        assert len(vertical) == 4
        assert len(horizontal) == 2
        assert {p.origin[2] + p.u[2] + p.v[2] for p in horizontal} == {0.0, 3.0}

    def test_room_has_six_patches(self):
        scene = generate_scene("room", (10.0, 10.0, 3.0))
        assert len(scene.patches) == 6
        assert scene.total_area == pytest.approx(2 * 100 + 4 * 30)

    def test_loop_course_closed_circuit(self):
        scene = generate_scene("loop_course", (30.0, 4.0, 3.0))
        assert all(p.area > 0 for p in scene.patches)
        # walls at both the outer shell and the inner hole
        wall_x = {p.origin[0] for p in scene.patches if p.u[0] == 0 and p.v[2] != 0}
        assert {0.0, 4.0, 26.0, 30.0} <= wall_x

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_scene("corridor", (0.0, 4.0, 3.0))
        with pytest.raises(ValueError):
            generate_scene("loop_course", (10.0, 6.0, 3.0))  # hole vanishes
        with pytest.raises(ValueError):
            generate_scene("hallway")
        with pytest.raises(ValueError):
            Scene((), 1.0)
        with pytest.raises(ValueError):
            Scene((Patch((0, 0, 0), (1, 0, 0), (0, 1, 0)),), 0.0)
        with pytest.raises(ValueError):
            Patch((0, 0, 0), (0, 0, 0), (0, 1, 0))


class TestSimulateScan:
    def test_zero_sigma_floor_is_exact(self):
        floor = Scene((Patch((0.0, 0.0, 0.0), (10.0, 0, 0), (0, 10.0, 0)),), 50.0)
        pose = Pose(Rotation.identity(), (2.0, 1.0, 1.5))
        cloud = simulate_scan(floor, pose, ScanSpec(max_range=20.0, sigma=0.0,
                                                    points_per_frame=400, seed=3))
        assert len(cloud.points) == 400
        world = pose.transform_points(cloud.points)
        assert np.all(world[:, 2] == 0.0)

    def test_seed_reproducibility(self):
        scene = generate_scene("room")
        pose = Pose(Rotation.identity(), (5.0, 5.0, 1.5))
        spec = ScanSpec(max_range=30.0, sigma=0.02, points_per_frame=777, seed=11)
        a = simulate_scan(scene, pose, spec)
        b = simulate_scan(scene, pose, spec)
        assert np.array_equal(a.points, b.points)
        c = simulate_scan(scene, pose, ScanSpec(30.0, 0.02, 777, seed=12))
        assert a.points.shape == c.points.shape
        assert not np.array_equal(a.points, c.points)

    def test_full_count_when_surface_sufficient(self):
        scene = generate_scene("room", (10.0, 10.0, 3.0), density=100.0)
        pose = Pose(Rotation.identity(), (5.0, 5.0, 1.5))
        cloud = simulate_scan(scene, pose, ScanSpec(50.0, 0.0, 1500, seed=0))
        assert len(cloud.points) == 1500

    def test_empty_when_nothing_in_range(self):
        scene = generate_scene("room", (10.0, 10.0, 3.0))
        pose = Pose(Rotation.identity(), (5.0, 5.0, 1.5))
        cloud = simulate_scan(scene, pose, ScanSpec(max_range=0.5, sigma=0.0,
                                                    points_per_frame=100, seed=0))
        assert cloud.points.shape == (0, 3)

    def test_sparse_scene_limits_count(self):
        patch = Patch((0.0, 0.0, 0.0), (2.0, 0, 0), (0, 2.0, 0))
        scene = Scene((patch,), density=10.0)  # 40 candidate points total
        pose = Pose(Rotation.identity(), (1.0, 1.0, 1.0))
        cloud = simulate_scan(scene, pose, ScanSpec(100.0, 0.0, 100, seed=0))
        assert len(cloud.points) == 40

    def test_sensor_frame_and_range(self):
        scene = generate_scene("corridor")
        yaw = Rotation.from_rotvec((0.0, 0.0, 0.8))
        pose = Pose(yaw, (12.0, 0.5, 1.5))
        spec = ScanSpec(max_range=9.0, sigma=0.01, points_per_frame=2000, seed=5)
        cloud = simulate_scan(scene, pose, spec)
        assert len(cloud.points) > 100
        # rigid transform preserves range, so sensor-frame norms obey the
        # max-range filter up to the added noise
        norms = np.linalg.norm(cloud.points, axis=1)
        assert norms.max() <= spec.max_range + 6 * spec.sigma
        # pushing back through the pose lands on the corridor shell
        world = pose.transform_points(cloud.points)
        tol = 6 * spec.sigma
        on_plane = (
            (np.abs(world[:, 1] - 2.0) < tol) | (np.abs(world[:, 1] + 2.0) < tol)
            | (np.abs(world[:, 2]) < tol) | (np.abs(world[:, 2] - 3.0) < tol)
            | (np.abs(world[:, 0]) < tol) | (np.abs(world[:, 0] - 40.0) < tol)
        )
        assert on_plane.all()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ScanSpec(max_range=0.0)
        with pytest.raises(ValueError):
            ScanSpec(sigma=-0.1)
        with pytest.raises(ValueError):
            ScanSpec(points_per_frame=-1)


class TestPaths:
    def test_corridor_path(self):
        poses = corridor_path(40.0, 11, height=1.5, margin=2.0)
        xs = [p.translation[0] for p in poses]
        assert xs[0] == pytest.approx(2.0)
        assert xs[-1] == pytest.approx(38.0)
        assert all(p.translation[2] == 1.5 for p in poses)

    def test_loop_path_stays_on_centerline(self):
        poses = loop_path(side=30.0, width=4.0, n_frames=24, laps=2)
        assert len(poses) == 48
        for pose in poses:
            x, y, _ = pose.translation
            on_rail = (
                math.isclose(x, 2.0) or math.isclose(x, 28.0)
                or math.isclose(y, 2.0) or math.isclose(y, 28.0)
            )
            assert on_rail
        # laps revisit the same ground: pose k and pose k+24 coincide
        for a, b in zip(poses[:24], poses[24:]):
            assert np.allclose(a.translation, b.translation, atol=1e-9)


class TestTwoSession:
    def _paths(self, n1=30, n2=30):
        return corridor_path(40.0, n1), corridor_path(40.0, n2, height=1.6)

    def test_zero_noise_composes_to_truth(self):
        data = generate_two_session(None, self._paths(), NoiseModel(0.0, 0.0), seed=1)
        for truth, odometry in ((data.truth1, data.odometry1),
                                (data.truth2, data.odometry2)):
            poses = compose_odometry(truth[0].pose, odometry)
            for entry, pose in zip(truth, poses):
                gap = np.abs(entry.pose.as_matrix() - pose.as_matrix()).max()
                assert gap < 1e-10

    def test_fixed_seed_reproducible(self):
        scene = generate_scene("corridor")
        spec = ScanSpec(20.0, 0.01, 300, seed=7)
        a = generate_two_session(scene, self._paths(10, 10), seed=42, scan_spec=spec)
        b = generate_two_session(scene, self._paths(10, 10), seed=42, scan_spec=spec)
        for ea, eb in zip(a.odometry1 + a.odometry2 + a.loops,
                          b.odometry1 + b.odometry2 + b.loops):
            assert np.array_equal(ea[2].as_matrix(), eb[2].as_matrix())
        for sa, sb in zip(a.scans1 + a.scans2, b.scans1 + b.scans2):
            assert np.array_equal(sa.points, sb.points)
        c = generate_two_session(scene, self._paths(10, 10), seed=43, scan_spec=spec)
        assert not np.array_equal(a.odometry1[0][2].as_matrix(),
                                  c.odometry1[0][2].as_matrix())

    def test_translation_noise_statistics(self):
        # >= 500 edges, empirical sigma within 20% of the requested one
        paths = (corridor_path(40.0, 501), corridor_path(40.0, 3))
        noise = NoiseModel(sigma_t=0.01, sigma_r=math.radians(0.1))
        data = generate_two_session(None, paths, noise, seed=9, n_loops=0)
        assert len(data.odometry1) == 500
        samples = np.concatenate([
            relative_noise(paths[0][i], paths[0][j], measurement)
            for i, j, measurement, _ in data.odometry1
        ]).reshape(-1, 6)
        assert abs(samples[:, 3:].std() - 0.01) < 0.002
        assert abs(samples[:, :3].std() - noise.sigma_r) < 0.2 * noise.sigma_r

    def test_loops_land_on_overlap(self):
        data = generate_two_session(None, self._paths(), seed=3, n_loops=10,
                                    loop_radius=2.0)
        assert len(data.loops) == 10
        paths = self._paths()
        for i, j, measurement, info in data.loops:
            t1 = np.asarray(paths[0][i].translation)
            t2 = np.asarray(paths[1][j].translation)
            assert np.linalg.norm(t1 - t2) <= 2.0
            assert np.all(np.linalg.eigvalsh(info) > 0)
            gap = relative_noise(paths[0][i], paths[1][j], measurement)
            assert np.linalg.norm(gap) < 0.1

    def test_disjoint_paths_have_no_loops(self):
        paths = (corridor_path(40.0, 10, height=1.5),
                 [Pose(Rotation.identity(), (x, 0.0, 50.0)) for x in range(10)])
        data = generate_two_session(None, paths, seed=0, loop_radius=1.0)
        assert data.loops == []

    def test_session_graph_helper(self):
        data = generate_two_session(None, self._paths(8, 8), seed=5)
        poses = compose_odometry(data.truth1[0].pose, data.odometry1)
        graph = build_session_graph(poses, data.odometry1, session=1, fix_first=True)
        assert len(graph.nodes) == 8
        assert len(graph.edges) == 7
        assert graph.nodes[0].fixed and not graph.nodes[3].fixed
        assert all(n.session == 1 for n in graph.nodes.values())

    def test_perturb_pose_moves(self):
        rng = np.random.default_rng(0)
        pose = Pose(Rotation.identity(), (1.0, 2.0, 3.0))
        moved = perturb_pose(pose, 0.5, 0.05, rng)
        assert np.linalg.norm(np.asarray(moved.translation) - (1, 2, 3)) > 1e-3

    def test_noise_model_validation(self):
        with pytest.raises(ValueError):
            NoiseModel(-0.01, 0.0)


class TestCoverage:
    def test_revisit_sees_no_new_voxels(self):
        # second lap of the loop course re-observes surface the first lap
        # already mapped; voxel size divides the course dimensions so every
        # populated cell has a broad surface intersection
        scene = generate_scene("loop_course", (30.0, 4.0, 3.0), density=100.0)
        poses = loop_path(side=30.0, width=4.0, n_frames=30, laps=2)
        spec = ScanSpec(max_range=100.0, sigma=0.0, points_per_frame=4000, seed=21)
        config = SelectorConfig(tau=0.05, voxel_size=2.0, radius=1000.0,
                                commit_policy="always")
        selector = KeyframeSelector(config)
        decisions = []
        for k, pose in enumerate(poses):
            cloud = simulate_scan(scene, pose, ScanSpec(100.0, 0.0, 4000, seed=21 + k),
                                  frame_index=k)
            if k == 0:
                decisions.append(selector.bootstrap(cloud.points, pose))
            else:
                decisions.append(selector.process_frame(cloud.points, pose))
        assert all(d.new_count == 0 for d in decisions[30:])
