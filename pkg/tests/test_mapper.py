import math

import numpy as np
import pytest

from vislam.errors import DegenerateGeometry, NegativeDepth, SolverDiverged
from vislam.frontend import Feature, descriptor_from_id
from vislam.geometry import CameraModel, RigidTransform, exp_so3, project, rotation_angle, unproject
from vislam.mapper import (
    Keyframe,
    MapPoint,
    MapperConfig,
    Observation,
    SparseMap,
    insert_keyframe,
    local_bundle_adjust,
    observation_reprojection_error,
    prune,
    should_insert_keyframe,
    stereo_match,
    triangulate,
)
from vislam.tracker import CalibrationSet

BASELINE = 0.065


def make_calib():
    cam = CameraModel(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)
    return CalibrationSet(
        cameras=(cam, cam),
        imu_to_cam=(RigidTransform.identity(),
                    RigidTransform(np.eye(3), [-BASELINE, 0.0, 0.0])),
    )


def body_pose(center, rotation=None):
    """global->body transform for a body at `center` with body->global rotation."""
    r_bg = np.eye(3) if rotation is None else rotation
    r_gb = r_bg.T
    return RigidTransform(r_gb, -r_gb @ np.asarray(center, dtype=float))


def make_landmarks(rng, n=60):
    return rng.uniform([-2.0, -1.5, 4.0], [2.0, 1.5, 8.0], size=(n, 3))


def keyframe_at(kf_id, center, landmarks, calib, rotation=None, timestamp=None,
                with_right=True, pixel_noise=0.0, rng=None):
    pose = body_pose(center, rotation)
    kf = Keyframe(id=kf_id, timestamp=timestamp if timestamp is not None else float(kf_id),
                  pose=pose)
    for cam_idx in (0, 1) if with_right else (0,):
        cam_pose = kf.camera_pose(calib, cam_idx)
        for lm_id, lm in enumerate(landmarks):
            x_cam = cam_pose.apply(lm)
            if x_cam[2] <= 0.1:
                continue
            uv = project(calib.cameras[cam_idx], x_cam)
            if not calib.cameras[cam_idx].contains(uv):
                continue
            if pixel_noise and rng is not None:
                uv = uv + rng.normal(size=2) * pixel_noise
            feat = Feature(id=lm_id, pixel=uv, descriptor=descriptor_from_id(lm_id))
            (kf.features_left if cam_idx == 0 else kf.features_right).append(feat)
    return kf


def build_map(n_kfs=5, n_points=60, seed=0, spacing=0.25):
    """Noiseless scene: keyframes on a line, all observing the same landmarks.
    Returns (map, landmarks, calib)."""
    rng = np.random.default_rng(seed)
    calib = make_calib()
    landmarks = make_landmarks(rng, n_points)
    sparse_map = SparseMap()
    for k in range(n_kfs):
        kf = keyframe_at(k, [k * spacing, 0.02 * k, 0.0], landmarks, calib)
        sparse_map.add_keyframe(kf)
    for lm_id, lm in enumerate(landmarks):
        sparse_map.add_point(MapPoint(lm_id, lm.copy(), descriptor_from_id(lm_id)))
    for kf in sparse_map.keyframes.values():
        for feat in kf.features_left:
            feat.map_point_id = feat.id
            sparse_map.add_observation(Observation(kf.id, feat.id, 0, feat.id, feat.pixel))
        for feat in kf.features_right:
            feat.map_point_id = feat.id
            sparse_map.add_observation(Observation(kf.id, feat.id, 1, feat.id, feat.pixel))
    return sparse_map, landmarks, calib


# --------------------------------------------------------------- keyframe rule


def test_first_keyframe_always_inserted():
    assert should_insert_keyframe(RigidTransform.identity(), SparseMap(), 0.26, 0.3)


def test_identical_pose_not_inserted():
    m, _, _ = build_map(n_kfs=1)
    pose = m.keyframes[0].pose
    assert not should_insert_keyframe(pose, m, 0.26, 0.3)


def test_rotation_beyond_threshold_inserted():
    m, _, _ = build_map(n_kfs=1)
    base = m.keyframes[0].pose
    rotated = RigidTransform(exp_so3([0.0, 0.35, 0.0]) @ base.rotation, base.translation)
    assert should_insert_keyframe(rotated, m, angle_thresh=0.26, dist_thresh=10.0)
    slightly = RigidTransform(exp_so3([0.0, 0.2, 0.0]) @ base.rotation, base.translation)
    assert not should_insert_keyframe(slightly, m, angle_thresh=0.26, dist_thresh=10.0)


def test_distance_beyond_threshold_inserted():
    m, _, _ = build_map(n_kfs=1)
    base = m.keyframes[0].pose
    moved = RigidTransform(base.rotation, base.translation + [0.0, 0.0, 0.5])
    assert should_insert_keyframe(moved, m, angle_thresh=0.26, dist_thresh=0.3)


# --------------------------------------------------------------- stereo match


def test_stereo_match_rectified_rows_and_disparity():
    rng = np.random.default_rng(1)
    calib = make_calib()
    landmarks = make_landmarks(rng, 40)
    kf = keyframe_at(0, [0, 0, 0], landmarks, calib)
    pairs = stereo_match(kf, calib, epipolar_tol_px=2.0)
    assert len(pairs) > 20
    for lf, rf in pairs:
        assert abs(lf.pixel[1] - rf.pixel[1]) < 2.0  # epipolar lines are rows
        assert lf.pixel[0] - rf.pixel[0] > 0  # disparity positive


def test_stereo_match_precision_on_noiseless_scene():
    rng = np.random.default_rng(2)
    calib = make_calib()
    landmarks = make_landmarks(rng, 50)
    kf = keyframe_at(0, [0, 0, 0], landmarks, calib)
    pairs = stereo_match(kf, calib, epipolar_tol_px=2.0)
    assert pairs, "scene must produce matches"
    for lf, rf in pairs:
        assert lf.id == rf.id  # feature ids encode the generating landmark


def test_stereo_match_no_candidate_within_tolerance():
    calib = make_calib()
    kf = Keyframe(id=0, timestamp=0.0, pose=RigidTransform.identity())
    kf.features_left.append(Feature(id=0, pixel=(320.0, 100.0),
                                    descriptor=descriptor_from_id(0)))
    kf.features_right.append(Feature(id=1, pixel=(320.0, 300.0),
                                     descriptor=descriptor_from_id(0)))
    assert stereo_match(kf, calib, epipolar_tol_px=2.0) == []


# --------------------------------------------------------------- triangulation


def test_triangulate_stereo_baseline_exact():
    cam0 = RigidTransform.identity()  # camera -> global
    cam1 = RigidTransform(np.eye(3), [BASELINE, 0.0, 0.0])
    point = np.array([0.0, 0.0, 2.0])
    b0 = point / np.linalg.norm(point)
    b1 = point - cam1.translation
    b1 = b1 / np.linalg.norm(b1)
    rec = triangulate([(cam0, b0), (cam1, b1)])
    assert np.max(np.abs(rec - point)) < 1e-9


def test_triangulate_identical_poses_degenerate():
    cam = RigidTransform.identity()
    with pytest.raises(DegenerateGeometry):
        triangulate([(cam, [0, 0, 1.0]), (cam, [0, 0, 1.0])])


def test_triangulate_negative_depth():
    cam0 = RigidTransform.identity()
    cam1 = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    # rays diverge behind the cameras
    with pytest.raises(NegativeDepth):
        triangulate([(cam0, [-0.3, 0, -1.0]), (cam1, [0.3, 0, -1.0])])


def test_triangulate_noisy_monte_carlo_median():
    # oracle: 100 trials, 5 views, 0.5 px noise, median error < 2 cm at 2 m
    rng = np.random.default_rng(3)
    calib = make_calib()
    cam = calib.cameras[0]
    point = np.array([0.1, -0.05, 2.0])
    errors = []
    for _ in range(100):
        obs = []
        for k in range(5):
            center = np.array([k * 0.1, 0.0, 0.0])
            cam_to_global = RigidTransform(np.eye(3), center)
            uv = project(cam, point - center) + rng.normal(size=2) * 0.5
            obs.append((cam_to_global, unproject(cam, uv)))
        errors.append(float(np.linalg.norm(triangulate(obs) - point)))
    assert np.median(errors) < 0.02


# --------------------------------------------------------------- insertion


def test_first_keyframe_creates_stereo_points_only():
    rng = np.random.default_rng(4)
    calib = make_calib()
    landmarks = make_landmarks(rng, 40)
    sparse_map = SparseMap()
    kf = keyframe_at(0, [0, 0, 0], landmarks, calib)
    n_pairs = len(stereo_match(kf, calib, 2.0))
    created = insert_keyframe(sparse_map, kf, [], calib)
    assert created == n_pairs > 0
    for pid in sparse_map.points:
        obs = sparse_map.observations_of_point(pid)
        assert len(obs) == 2
        assert {o.camera_index for o in obs} == {0, 1}
    sparse_map.check_integrity()
    # triangulated stereo points land on the generating landmarks
    for pid, point in sparse_map.points.items():
        lm_id = next(iter(sparse_map.observations_of_point(pid))).feature_id
        assert np.max(np.abs(point.position - landmarks[lm_id])) < 1e-6


def test_second_keyframe_adds_constraints_without_duplicates():
    rng = np.random.default_rng(5)
    calib = make_calib()
    landmarks = make_landmarks(rng, 40)
    sparse_map = SparseMap()
    kf0 = keyframe_at(0, [0, 0, 0], landmarks, calib)
    insert_keyframe(sparse_map, kf0, [], calib)
    points_before = set(sparse_map.points)
    feat_to_point = {f.id: f.map_point_id for f in kf0.features_left
                     if f.map_point_id is not None}

    kf1 = keyframe_at(1, [0.3, 0, 0], landmarks, calib, with_right=False)
    associations = [(f.id, feat_to_point[f.id]) for f in kf1.features_left
                    if f.id in feat_to_point][:30]
    obs_before = sparse_map.num_observations()
    created = insert_keyframe(sparse_map, kf1, associations, calib)
    assert created == 0
    assert set(sparse_map.points) == points_before
    assert sparse_map.num_observations() == obs_before + 30
    sparse_map.check_integrity()


def test_keyframe_with_zero_matches_inserted_empty():
    calib = make_calib()
    sparse_map = SparseMap()
    kf = Keyframe(id=0, timestamp=0.0, pose=RigidTransform.identity())
    created = insert_keyframe(sparse_map, kf, [], calib)
    assert created == 0
    assert 0 in sparse_map.keyframes
    assert sparse_map.observations_of_keyframe(0) == []


def test_temporal_triangulation_across_keyframes():
    rng = np.random.default_rng(6)
    calib = make_calib()
    landmarks = make_landmarks(rng, 30)
    sparse_map = SparseMap()
    # two keyframes with left-only features (no stereo), same track ids
    kf0 = keyframe_at(0, [0, 0, 0], landmarks, calib, with_right=False)
    insert_keyframe(sparse_map, kf0, [], calib)
    assert len(sparse_map.points) == 0  # nothing to triangulate yet
    kf1 = keyframe_at(1, [0.4, 0, 0], landmarks, calib, with_right=False)
    created = insert_keyframe(sparse_map, kf1, [], calib)
    assert created > 0
    for pid, point in sparse_map.points.items():
        assert len(sparse_map.observations_of_point(pid)) == 2
        lm_id = sparse_map.observations_of_point(pid)[0].feature_id
        assert np.max(np.abs(point.position - landmarks[lm_id])) < 1e-6
    sparse_map.check_integrity()


# --------------------------------------------------------------- bundle adjustment


def total_reproj_cost(sparse_map, calib):
    return sum(observation_reprojection_error(sparse_map, o, calib) ** 2
               for o in sparse_map.observations())


def test_ba_noiseless_map_is_stationary():
    sparse_map, landmarks, calib = build_map()
    poses_before = {k: kf.pose.matrix().copy() for k, kf in sparse_map.keyframes.items()}
    report = local_bundle_adjust(sparse_map, 4, MapperConfig(), calib)
    assert report.final_cost < 1e-12
    for k, kf in sparse_map.keyframes.items():
        assert np.max(np.abs(kf.pose.matrix() - poses_before[k])) < 1e-8


def test_ba_recovers_perturbed_keyframe():
    sparse_map, landmarks, calib = build_map(n_kfs=5)
    truth = sparse_map.keyframes[2].pose
    bad = RigidTransform(exp_so3([0.0, math.radians(1.0), 0.0]) @ truth.rotation,
                         truth.translation + [0.02, 0.0, 0.0])
    sparse_map.keyframes[2].pose = bad
    report = local_bundle_adjust(sparse_map, 4, MapperConfig(), calib)
    recovered = sparse_map.keyframes[2].pose
    assert np.linalg.norm(recovered.translation - truth.translation) < 1e-4
    assert rotation_angle(recovered.rotation @ truth.rotation.T) < 1e-4
    # cost history is monotone non-increasing
    assert all(c2 <= c1 + 1e-15 for c1, c2 in zip(report.cost_history,
                                                  report.cost_history[1:]))
    assert report.final_cost <= report.initial_cost


def test_ba_restores_perturbed_points_to_submillimeter():
    sparse_map, landmarks, calib = build_map(n_kfs=5)
    rng = np.random.default_rng(7)
    for point in sparse_map.points.values():
        point.position = point.position + rng.normal(size=3) * 0.005
    local_bundle_adjust(sparse_map, 4, MapperConfig(), calib)
    err = [np.linalg.norm(sparse_map.points[i].position - landmarks[i])
           for i in sparse_map.points]
    rmse = float(np.sqrt(np.mean(np.square(err))))
    assert rmse < 1e-3


def test_ba_gauge_keyframe_bit_identical():
    sparse_map, _, calib = build_map(n_kfs=5)
    first = min(sparse_map.keyframes)
    rot_before = sparse_map.keyframes[first].pose.rotation.copy()
    t_before = sparse_map.keyframes[first].pose.translation.copy()
    sparse_map.keyframes[2].pose = RigidTransform(
        sparse_map.keyframes[2].pose.rotation,
        sparse_map.keyframes[2].pose.translation + [0.01, 0, 0])
    local_bundle_adjust(sparse_map, 4, MapperConfig(), calib)
    assert np.array_equal(sparse_map.keyframes[first].pose.rotation, rot_before)
    assert np.array_equal(sparse_map.keyframes[first].pose.translation, t_before)


def test_ba_single_keyframe_points_only():
    sparse_map, landmarks, calib = build_map(n_kfs=1)
    rng = np.random.default_rng(8)
    for point in sparse_map.points.values():
        point.position = point.position + rng.normal(size=3) * 0.01
    report = local_bundle_adjust(sparse_map, 0, MapperConfig(), calib)
    assert report.final_cost < report.initial_cost
    err = [np.linalg.norm(sparse_map.points[i].position - landmarks[i])
           for i in sparse_map.points]
    assert float(np.sqrt(np.mean(np.square(err)))) < 1e-3


def test_ba_diverged_leaves_map_unchanged():
    sparse_map, landmarks, calib = build_map(n_kfs=2)
    sparse_map.points[0].position = np.array([np.nan, 0.0, 5.0])
    poses_before = {k: kf.pose.matrix().copy() for k, kf in sparse_map.keyframes.items()}
    with pytest.raises(SolverDiverged):
        local_bundle_adjust(sparse_map, 1, MapperConfig(), calib)
    for k, kf in sparse_map.keyframes.items():
        assert np.array_equal(kf.pose.matrix(), poses_before[k])


# --------------------------------------------------------------- pruning


def test_prune_clean_map_removes_nothing():
    sparse_map, _, calib = build_map()
    n_obs = sparse_map.num_observations()
    removed = prune(sparse_map, MapperConfig(), calib)
    assert removed == {"observations": 0, "points": 0, "keyframes": 0}
    assert sparse_map.num_observations() == n_obs
    sparse_map.check_integrity()


def test_prune_removes_injected_bad_constraint():
    sparse_map, landmarks, calib = build_map()
    target = sparse_map.observations_of_keyframe(2)[0]
    pid = target.map_point_id
    obs_of_point = len(sparse_map.observations_of_point(pid))
    sparse_map.remove_observation(target)
    bad = Observation(target.keyframe_id, pid, target.camera_index,
                      target.feature_id, target.pixel + np.array([50.0, 0.0]))
    sparse_map.add_observation(bad)
    removed = prune(sparse_map, MapperConfig(), calib)
    assert removed["observations"] == 1
    assert bad not in sparse_map.observations_of_keyframe(2)
    # enough other views kept the point alive
    assert (pid in sparse_map.points) == (obs_of_point - 1 >= 2)
    sparse_map.check_integrity()


def test_prune_removes_point_when_support_drops():
    sparse_map, _, calib = build_map(n_kfs=1)
    pid = next(iter(sparse_map.points))
    # corrupt one of the two stereo observations: the constraint goes, and the
    # point drops below the 2-observation minimum
    target = sparse_map.observations_of_point(pid)[0]
    sparse_map.remove_observation(target)
    sparse_map.add_observation(Observation(target.keyframe_id, pid, target.camera_index,
                                           target.feature_id,
                                           target.pixel + np.array([50.0, 0.0])))
    prune(sparse_map, MapperConfig(), calib)
    assert pid not in sparse_map.points
    sparse_map.check_integrity()


def test_prune_enforces_keyframe_limit_oldest_first():
    config = MapperConfig(keyframe_limit=4)
    sparse_map, _, calib = build_map(n_kfs=5)
    removed = prune(sparse_map, config, calib)
    assert removed["keyframes"] == 1
    assert 0 not in sparse_map.keyframes
    assert len(sparse_map.keyframes) == 4
    sparse_map.check_integrity()


def test_prune_removes_keyframe_with_too_few_constraints():
    sparse_map, _, calib = build_map(n_kfs=3)
    starved = Keyframe(id=99, timestamp=99.0, pose=RigidTransform.identity())
    sparse_map.add_keyframe(starved)
    prune(sparse_map, MapperConfig(), calib)
    assert 99 not in sparse_map.keyframes
    sparse_map.check_integrity()


def test_map_dump_text(tmp_path):
    sparse_map, _, _ = build_map(n_kfs=2, n_points=5)
    out = tmp_path / "map.txt"
    sparse_map.dump_text(out)
    lines = out.read_text().strip().splitlines()
    kinds = {line.split()[0] for line in lines}
    assert kinds == {"point", "keyframe"}
    assert sum(1 for l in lines if l.startswith("point ")) == len(sparse_map.points)
