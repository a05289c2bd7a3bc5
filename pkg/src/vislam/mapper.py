"""Global sparse map maintained in parallel with tracking: keyframe
selection, map-point creation via stereo/temporal triangulation, local bundle
adjustment, and pruning.

The mapper owns the SparseMap and runs on its own execution context; the
tracker communicates by message passing (keyframe candidates in, immutable
MapView snapshots out). Nothing here takes locks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, NegativeDepth, SolverDiverged
from .frontend import Feature, hamming
from .geometry import (
    RigidTransform,
    exp_so3,
    project,
    project_jacobian,
    rotation_angle,
    skew,
    unproject,
)
from .tracker import CalibrationSet

log = logging.getLogger(__name__)


@dataclass
class MapperConfig:
    keyframe_angle_rad: float = math.radians(15.0)
    keyframe_distance: float = 0.3
    epipolar_tol_px: float = 2.0
    min_triangulation_angle: float = 1e-4
    ba_shared_obs: int = 20
    ba_huber_px: float = 2.0
    ba_max_iterations: int = 20
    prune_reproj_px: float = 3.0
    min_point_obs: int = 2
    min_keyframe_obs: int = 3
    keyframe_limit: int = 50


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: RigidTransform  # global -> body
    features_left: list = field(default_factory=list)
    features_right: list = field(default_factory=list)

    def camera_pose(self, calib: CalibrationSet, camera_index: int) -> RigidTransform:
        """global -> camera transform for one of the rig's cameras."""
        return calib.imu_to_cam[camera_index].compose(self.pose)


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass(frozen=True)
class Observation:
    keyframe_id: int
    map_point_id: int
    camera_index: int
    feature_id: int
    pixel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))


class MapView:
    """Immutable snapshot of the map points visible to tracking."""

    def __init__(self, entries):
        self._entries = tuple(entries)

    def __len__(self):
        return len(self._entries)

    def iter_points(self):
        return iter(self._entries)

    def position_of(self, point_id):
        for pid, pos, _ in self._entries:
            if pid == point_id:
                return pos
        return None


class SparseMap:
    """Keyframes + 3D points + bipartite observation constraints."""

    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self._obs_by_kf: dict[int, list[Observation]] = {}
        self._obs_by_point: dict[int, list[Observation]] = {}
        self.next_keyframe_id = 0
        self.next_point_id = 0

    # ------------------------------------------------------------- accessors

    def observations(self):
        for obs_list in self._obs_by_kf.values():
            yield from obs_list

    def observations_of_keyframe(self, kf_id):
        return list(self._obs_by_kf.get(kf_id, []))

    def observations_of_point(self, point_id):
        return list(self._obs_by_point.get(point_id, []))

    def num_observations(self):
        return sum(len(v) for v in self._obs_by_kf.values())

    # ------------------------------------------------------------- mutation

    def add_keyframe(self, kf: Keyframe):
        self.keyframes[kf.id] = kf
        self._obs_by_kf.setdefault(kf.id, [])
        self.next_keyframe_id = max(self.next_keyframe_id, kf.id + 1)

    def add_point(self, point: MapPoint):
        self.points[point.id] = point
        self._obs_by_point.setdefault(point.id, [])
        self.next_point_id = max(self.next_point_id, point.id + 1)

    def add_observation(self, obs: Observation):
        if obs.keyframe_id not in self.keyframes:
            raise KeyError(f"keyframe {obs.keyframe_id} not in map")
        if obs.map_point_id not in self.points:
            raise KeyError(f"map point {obs.map_point_id} not in map")
        self._obs_by_kf[obs.keyframe_id].append(obs)
        self._obs_by_point[obs.map_point_id].append(obs)

    def remove_observation(self, obs: Observation):
        self._obs_by_kf[obs.keyframe_id].remove(obs)
        self._obs_by_point[obs.map_point_id].remove(obs)

    def remove_point(self, point_id):
        for obs in list(self._obs_by_point.get(point_id, [])):
            self.remove_observation(obs)
        self._obs_by_point.pop(point_id, None)
        self.points.pop(point_id, None)

    def remove_keyframe(self, kf_id):
        for obs in list(self._obs_by_kf.get(kf_id, [])):
            self.remove_observation(obs)
        self._obs_by_kf.pop(kf_id, None)
        self.keyframes.pop(kf_id, None)

    # ------------------------------------------------------------- utilities

    def snapshot(self) -> MapView:
        return MapView(
            (pid, p.position.copy(), p.descriptor) for pid, p in sorted(self.points.items())
        )

    def check_integrity(self):
        """Raise AssertionError on any dangling reference."""
        for kf_id, obs_list in self._obs_by_kf.items():
            assert kf_id in self.keyframes
            for obs in obs_list:
                assert obs.map_point_id in self.points
        for pid, obs_list in self._obs_by_point.items():
            assert pid in self.points
            for obs in obs_list:
                assert obs.keyframe_id in self.keyframes
                assert obs in self._obs_by_kf[obs.keyframe_id]

    def dump_text(self, path):
        """Debug dump: one line per point (id x y z) and per keyframe
        (id timestamp tx ty tz qx qy qz qw)."""
        from .geometry import UnitQuaternion

        with open(path, "w") as fh:
            for pid, point in sorted(self.points.items()):
                x, y, z = (float(v) for v in point.position)
                fh.write(f"point {pid} {x!r} {y!r} {z!r}\n")
            for kf_id, kf in sorted(self.keyframes.items()):
                q = UnitQuaternion.from_matrix(kf.pose.rotation)
                vals = [float(v) for v in (kf.timestamp, *kf.pose.translation,
                                           q.x, q.y, q.z, q.w)]
                fh.write(f"keyframe {kf_id} " + " ".join(repr(v) for v in vals) + "\n")


# ---------------------------------------------------------------- decisions


def should_insert_keyframe(pose: RigidTransform, sparse_map: SparseMap,
                           angle_thresh: float, dist_thresh: float) -> bool:
    """True when the pose is far enough from every existing keyframe, in
    rotation angle or translation, to cover new ground. An empty map always
    accepts its first keyframe."""
    if angle_thresh <= 0 or dist_thresh <= 0:
        raise ValueError("thresholds must be positive")
    if not sparse_map.keyframes:
        return True
    min_angle = math.inf
    min_dist = math.inf
    for kf in sparse_map.keyframes.values():
        min_angle = min(min_angle, rotation_angle(pose.rotation @ kf.pose.rotation.T))
        min_dist = min(min_dist, float(np.linalg.norm(pose.translation - kf.pose.translation)))
    return min_angle > angle_thresh or min_dist > dist_thresh


# ---------------------------------------------------------------- stereo


def stereo_match(kf: Keyframe, calib: CalibrationSet, epipolar_tol_px: float):
    """Match unassociated left features to right features along epipolar lines.

    Candidates must lie within `epipolar_tol_px` of the epipolar line induced
    by the calibrated extrinsics; the best candidate by descriptor Hamming
    distance wins, with a mutual-best check. Returns (left, right) pairs.
    """
    rel = calib.imu_to_cam[1].compose(calib.imu_to_cam[0].inverse())  # cam0 -> cam1
    essential = skew(rel.translation) @ rel.rotation
    cam0, cam1 = calib.cameras
    px_scale = 0.5 * (cam1.fx + cam1.fy)

    lefts = [f for f in kf.features_left if f.map_point_id is None and f.descriptor is not None]
    rights = [f for f in kf.features_right if f.map_point_id is None and f.descriptor is not None]
    if not lefts or not rights:
        return []

    right_normalized = []
    for f in rights:
        b = unproject(cam1, f.pixel)
        right_normalized.append(b / b[2])

    best_left = {}
    for lf in lefts:
        b0 = unproject(cam0, lf.pixel)
        line = essential @ (b0 / b0[2])
        denom = math.hypot(line[0], line[1])
        if denom < 1e-12:
            continue
        best = None
        for rf, x1 in zip(rights, right_normalized):
            dist_px = abs(float(x1 @ line)) / denom * px_scale
            if dist_px > epipolar_tol_px:
                continue
            d = hamming(lf.descriptor, rf.descriptor)
            if best is None or (d, rf.id) < (best[0], best[1].id):
                best = (d, rf)
        if best is not None:
            best_left[lf.id] = (lf, best[1], best[0])

    # mutual-best: each right feature keeps only its lowest-distance left
    best_right = {}
    for lf, rf, d in best_left.values():
        cur = best_right.get(rf.id)
        if cur is None or (d, lf.id) < (cur[2], cur[0].id):
            best_right[rf.id] = (lf, rf, d)
    return [(lf, rf) for lf, rf, _ in sorted(best_right.values(), key=lambda t: t[0].id)]


def triangulate(observations) -> np.ndarray:
    """Midpoint linear least squares over (camera->global pose, bearing) pairs.

    Minimizes the summed squared distance to the observation rays. Raises
    DegenerateGeometry when all rays are within 1e-4 rad of parallel and
    NegativeDepth when the solution falls behind any observing camera.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    centers, directions = [], []
    for cam_to_global, bearing in observations:
        d = cam_to_global.rotation @ np.asarray(bearing, dtype=float)
        directions.append(d / np.linalg.norm(d))
        centers.append(cam_to_global.translation)

    max_angle = 0.0
    for i in range(len(directions)):
        for j in range(i + 1, len(directions)):
            c = np.clip(abs(float(directions[i] @ directions[j])), 0.0, 1.0)
            max_angle = max(max_angle, math.acos(c))
    if max_angle <= 1e-4:
        raise DegenerateGeometry(f"max ray angle {max_angle:.2e} rad")

    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, directions):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    point = np.linalg.solve(a, b)

    for c, d in zip(centers, directions):
        if float(d @ (point - c)) <= 0.0:
            raise NegativeDepth("triangulated point behind a camera")
    return point


# ---------------------------------------------------------------- insertion


def insert_keyframe(sparse_map: SparseMap, kf: Keyframe, associations,
                    calib: CalibrationSet, config: MapperConfig | None = None):
    """Insert a keyframe, add observation constraints for its existing 2D-3D
    associations, and create new map points from stereo matches and from
    temporal tracks spanning at least two keyframes.

    `associations` is a list of (feature_id, map_point_id) for features of
    kf.features_left. Triangulation failures skip the candidate point only.
    Returns the number of new points created.
    """
    config = config or MapperConfig()
    feature_by_id = {f.id: f for f in kf.features_left}
    old_keyframes = list(sparse_map.keyframes.values())
    sparse_map.add_keyframe(kf)

    for feature_id, point_id in associations:
        feat = feature_by_id.get(feature_id)
        if feat is None or point_id not in sparse_map.points:
            continue
        feat.map_point_id = point_id
        sparse_map.add_observation(Observation(kf.id, point_id, 0, feature_id, feat.pixel))

    cam0_pose = kf.camera_pose(calib, 0)
    cam1_pose = kf.camera_pose(calib, 1)
    created = 0

    # spatial: stereo pairs on this keyframe
    for lf, rf in stereo_match(kf, calib, config.epipolar_tol_px):
        try:
            position = triangulate([
                (cam0_pose.inverse(), unproject(calib.cameras[0], lf.pixel)),
                (cam1_pose.inverse(), unproject(calib.cameras[1], rf.pixel)),
            ])
        except (DegenerateGeometry, NegativeDepth):
            continue
        point = MapPoint(sparse_map.next_point_id, position, descriptor=lf.descriptor)
        sparse_map.add_point(point)
        lf.map_point_id = point.id
        rf.map_point_id = point.id
        sparse_map.add_observation(Observation(kf.id, point.id, 0, lf.id, lf.pixel))
        sparse_map.add_observation(Observation(kf.id, point.id, 1, rf.id, rf.pixel))
        created += 1

    # temporal: unassociated left features tracked from earlier keyframes
    for feat in kf.features_left:
        if feat.map_point_id is not None:
            continue
        views = []
        for prev in old_keyframes:
            for pf in prev.features_left:
                if pf.id == feat.id and pf.map_point_id is None:
                    views.append((prev, pf))
        if not views:
            continue
        views.append((kf, feat))
        try:
            position = triangulate([
                (v_kf.camera_pose(calib, 0).inverse(), unproject(calib.cameras[0], v_f.pixel))
                for v_kf, v_f in views
            ])
        except (DegenerateGeometry, NegativeDepth):
            continue
        first_kf, first_feat = views[0]
        point = MapPoint(sparse_map.next_point_id, position, descriptor=first_feat.descriptor)
        sparse_map.add_point(point)
        for v_kf, v_f in views:
            v_f.map_point_id = point.id
            sparse_map.add_observation(Observation(v_kf.id, point.id, 0, v_f.id, v_f.pixel))
        created += 1
    return created


# ---------------------------------------------------------------- bundle adjustment


def observation_reprojection_error(sparse_map: SparseMap, obs: Observation,
                                   calib: CalibrationSet) -> float:
    kf = sparse_map.keyframes[obs.keyframe_id]
    point = sparse_map.points[obs.map_point_id]
    x_cam = kf.camera_pose(calib, obs.camera_index).apply(point.position)
    if x_cam[2] <= 1e-6:
        return math.inf
    return float(np.linalg.norm(obs.pixel - project(calib.cameras[obs.camera_index], x_cam)))


def _huber_weight_and_cost(norm, delta):
    if norm <= delta:
        return 1.0, 0.5 * norm * norm
    return delta / norm, delta * (norm - 0.5 * delta)


@dataclass
class BaReport:
    initial_cost: float
    final_cost: float
    cost_history: list
    iterations: int
    adjusted_keyframes: list
    adjusted_points: int


def _ba_subset(sparse_map: SparseMap, latest_kf_id: int, min_shared: int):
    latest_points = {o.map_point_id for o in sparse_map.observations_of_keyframe(latest_kf_id)}
    shared = {}
    for pid in latest_points:
        for obs in sparse_map.observations_of_point(pid):
            if obs.keyframe_id != latest_kf_id:
                shared[obs.keyframe_id] = shared.get(obs.keyframe_id, 0) + 1
    subset = {latest_kf_id} | {k for k, n in shared.items() if n >= min_shared}
    return subset, latest_points


def local_bundle_adjust(sparse_map: SparseMap, latest_kf_id: int,
                        config: MapperConfig, calib: CalibrationSet) -> BaReport:
    """Levenberg-Marquardt over the local subset: the latest keyframe, every
    keyframe sharing enough observations with it, and the points they see.

    The total Huber-robustified squared reprojection error never increases
    (steps are applied only when accepted). Keyframes outside the subset are
    held fixed, as is the map's first keyframe (gauge). Raises SolverDiverged
    with the map untouched when no usable step can be computed.
    """
    if not sparse_map.keyframes:
        raise ValueError("bundle adjustment on an empty map")
    subset, subset_points = _ba_subset(sparse_map, latest_kf_id, config.ba_shared_obs)
    gauge_id = min(sparse_map.keyframes)
    free_kfs = sorted(k for k in subset if k != gauge_id)
    free_points = sorted(
        pid for pid in subset_points
        if len(sparse_map.observations_of_point(pid)) >= 2
    )
    kf_index = {k: i for i, k in enumerate(free_kfs)}
    pt_index = {p: i for i, p in enumerate(free_points)}

    # residuals: every observation touching a free pose or free point
    obs_set = []
    for obs in sparse_map.observations():
        if obs.keyframe_id in kf_index or obs.map_point_id in pt_index:
            obs_set.append(obs)
    if not obs_set:
        return BaReport(0.0, 0.0, [0.0], 0, free_kfs, 0)

    poses = {k: sparse_map.keyframes[k].pose for k in sparse_map.keyframes}
    points = {p: sparse_map.points[p].position.copy() for p in sparse_map.points}
    delta_h = config.ba_huber_px

    def total_cost(pose_map, point_map):
        cost = 0.0
        for obs in obs_set:
            pose = pose_map[obs.keyframe_id]
            cam_pose = calib.imu_to_cam[obs.camera_index].compose(pose)
            x_cam = cam_pose.apply(point_map[obs.map_point_id])
            if x_cam[2] <= 1e-6 or not np.isfinite(x_cam).all():
                return math.inf
            r = obs.pixel - project(calib.cameras[obs.camera_index], x_cam)
            _, c = _huber_weight_and_cost(float(np.linalg.norm(r)), delta_h)
            cost += c
        return cost

    n_pose = 6 * len(free_kfs)
    n_pt = 3 * len(free_points)

    def build_normal_equations(pose_map, point_map):
        u = np.zeros((n_pose, n_pose))
        v_blocks = np.zeros((len(free_points), 3, 3))
        w = np.zeros((n_pose, n_pt))
        b_pose = np.zeros(n_pose)
        b_pt = np.zeros(n_pt)
        cost = 0.0
        for obs in obs_set:
            pose = pose_map[obs.keyframe_id]
            t_bc = calib.imu_to_cam[obs.camera_index]
            x_body = pose.apply(point_map[obs.map_point_id])
            x_cam = t_bc.apply(x_body)
            if x_cam[2] <= 1e-6:
                continue
            cam = calib.cameras[obs.camera_index]
            r = obs.pixel - project(cam, x_cam)
            norm = float(np.linalg.norm(r))
            weight, c = _huber_weight_and_cost(norm, delta_h)
            cost += c
            j_proj = project_jacobian(cam, x_cam)
            j_pose = None
            j_point = None
            if obs.keyframe_id in kf_index:
                # pose retraction T' = (exp(dtheta), dt) o T
                j_pose = np.hstack([
                    j_proj @ t_bc.rotation @ skew(x_body),
                    -j_proj @ t_bc.rotation,
                ])
            if obs.map_point_id in pt_index:
                j_point = -j_proj @ t_bc.rotation @ pose.rotation
            if j_pose is not None:
                i0 = 6 * kf_index[obs.keyframe_id]
                u[i0:i0 + 6, i0:i0 + 6] += weight * (j_pose.T @ j_pose)
                b_pose[i0:i0 + 6] += -weight * (j_pose.T @ r)
            if j_point is not None:
                pi = pt_index[obs.map_point_id]
                p0 = 3 * pi
                v_blocks[pi] += weight * (j_point.T @ j_point)
                b_pt[p0:p0 + 3] += -weight * (j_point.T @ r)
            if j_pose is not None and j_point is not None:
                i0 = 6 * kf_index[obs.keyframe_id]
                p0 = 3 * pt_index[obs.map_point_id]
                w[i0:i0 + 6, p0:p0 + 3] += weight * (j_pose.T @ j_point)
        return u, v_blocks, w, b_pose, b_pt, cost

    def solve_step(u, v_blocks, w, b_pose, b_pt, lam):
        u_d = u + lam * np.diag(np.maximum(np.diag(u), 1e-12))
        v_inv = np.zeros_like(v_blocks)
        for i in range(len(free_points)):
            vb = v_blocks[i] + lam * np.diag(np.maximum(np.diag(v_blocks[i]), 1e-12))
            v_inv[i] = np.linalg.inv(vb)
        if n_pt:
            wvi = np.zeros_like(w)
            for i in range(len(free_points)):
                wvi[:, 3 * i:3 * i + 3] = w[:, 3 * i:3 * i + 3] @ v_inv[i]
            if n_pose:
                s = u_d - wvi @ w.T
                rhs = b_pose - wvi @ b_pt
                d_pose = np.linalg.solve(s, rhs)
            else:
                d_pose = np.zeros(0)
            resid = b_pt - (w.T @ d_pose if n_pose else 0.0)
            d_pt = np.zeros(n_pt)
            for i in range(len(free_points)):
                d_pt[3 * i:3 * i + 3] = v_inv[i] @ resid[3 * i:3 * i + 3]
        else:
            d_pose = np.linalg.solve(u_d, b_pose) if n_pose else np.zeros(0)
            d_pt = np.zeros(0)
        return d_pose, d_pt

    def apply_step(pose_map, point_map, d_pose, d_pt):
        new_poses = dict(pose_map)
        new_points = dict(point_map)
        for k, i in kf_index.items():
            dx = d_pose[6 * i:6 * i + 6]
            old = pose_map[k]
            rot = exp_so3(dx[0:3])
            new_poses[k] = RigidTransform(rot @ old.rotation,
                                          rot @ old.translation + dx[3:6])
        for p, i in pt_index.items():
            new_points[p] = point_map[p] + d_pt[3 * i:3 * i + 3]
        return new_poses, new_points

    cost = total_cost(poses, points)
    if not math.isfinite(cost):
        raise SolverDiverged("initial cost is not finite")
    history = [cost]
    lam = 1e-4
    iterations = 0
    converged = False
    for iterations in range(1, config.ba_max_iterations + 1):
        u, v_blocks, w, b_pose, b_pt, _ = build_normal_equations(poses, points)
        accepted = False
        for _ in range(8):
            try:
                d_pose, d_pt = solve_step(u, v_blocks, w, b_pose, b_pt, lam)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not (np.isfinite(d_pose).all() and np.isfinite(d_pt).all()):
                lam *= 10.0
                continue
            trial_poses, trial_points = apply_step(poses, points, d_pose, d_pt)
            trial_cost = total_cost(trial_poses, trial_points)
            if trial_cost < cost:
                step_norm = float(np.linalg.norm(np.concatenate([d_pose, d_pt])))
                rel_drop = (cost - trial_cost) / max(cost, 1e-18)
                poses, points = trial_poses, trial_points
                cost = trial_cost
                history.append(cost)
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                converged = rel_drop < 1e-10 or step_norm < 1e-10
                break
            lam *= 10.0
        if not accepted or converged:
            break

    # commit: fixed entities (including the gauge keyframe) are untouched
    for k in free_kfs:
        sparse_map.keyframes[k].pose = poses[k]
    for p in free_points:
        sparse_map.points[p].position = points[p]
    return BaReport(history[0], cost, history, iterations, free_kfs, len(free_points))


# ---------------------------------------------------------------- pruning


def prune(sparse_map: SparseMap, config: MapperConfig, calib: CalibrationSet):
    """Map cleanup, in order: drop constraints with reprojection error above
    the threshold, then points with too few constraints, then keyframes with
    too few constraints, then the oldest keyframes beyond the count limit,
    then points orphaned by the keyframe removals. Referential integrity holds
    afterwards. Returns a dict of removal counts."""
    removed = {"observations": 0, "points": 0, "keyframes": 0}

    for obs in list(sparse_map.observations()):
        if observation_reprojection_error(sparse_map, obs, calib) > config.prune_reproj_px:
            sparse_map.remove_observation(obs)
            removed["observations"] += 1

    def sweep_points():
        for pid in list(sparse_map.points):
            if len(sparse_map.observations_of_point(pid)) < config.min_point_obs:
                sparse_map.remove_point(pid)
                removed["points"] += 1

    sweep_points()

    for kf_id in list(sparse_map.keyframes):
        if len(sparse_map.observations_of_keyframe(kf_id)) < config.min_keyframe_obs:
            sparse_map.remove_keyframe(kf_id)
            removed["keyframes"] += 1

    kf_ids = sorted(sparse_map.keyframes)
    while len(kf_ids) > config.keyframe_limit:
        oldest = kf_ids.pop(0)
        sparse_map.remove_keyframe(oldest)
        removed["keyframes"] += 1

    sweep_points()
    return removed
