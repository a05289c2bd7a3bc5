"""Synthetic trajectory + sensor simulator: the ground-truth oracle behind
the test suite. Produces an IMU/stereo SensorStream, a ground-truth
trajectory, per-frame landmark observations, and an optional GNSS stream,
all deterministic for a given seed.

IMU sampling modes:
  "interval" (default): each sample encodes the exact increment over its
    sampling interval (gyro from the log of the relative rotation, accel from
    the velocity delta), so feeding the samples through the discrete
    kinematic propagation reproduces the analytic trajectory up to the
    position rule's own O(dt^3) trapezoid error. This is also what an
    integrating IMU reports.
  "instantaneous": plain analytic derivatives at the sample time
    (w = body rate, a = R_G_B (accel - g) + bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import FrameObservation, SensorStream, StereoFramePair
from .errors import BehindCamera
from .evaluation import Trajectory
from .fusion import GnssMeasurement
from .geometry import (
    CameraModel,
    RigidTransform,
    UnitQuaternion,
    WorldParams,
    exp_so3,
    log_so3,
    project,
)
from .tracker import CalibrationSet, FilterState, ImuNoise, ImuSample

DEFAULT_BASELINE = 0.065  # m, stereo rig default


def default_sim_calibration(baseline=DEFAULT_BASELINE) -> CalibrationSet:
    cam = CameraModel(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)
    return CalibrationSet(
        cameras=(cam, cam),
        imu_to_cam=(RigidTransform.identity(),
                    RigidTransform(np.eye(3), [-baseline, 0.0, 0.0])),
    )


# ------------------------------------------------------------- trajectories


class CircleTrajectory:
    """Horizontal circle at constant angular rate; the camera looks along the
    direction of travel with image-down aligned to -z."""

    # camera axes at angle 0: x -> world x (radial), y -> -z (down), z -> world y
    _R0 = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])

    def __init__(self, radius=2.0, angular_rate=0.6, height=0.0, center=(0.0, 0.0)):
        self.radius = radius
        self.angular_rate = angular_rate
        self.height = height
        self.center = np.asarray(center, dtype=float)

    def position(self, t):
        a = self.angular_rate * t
        return np.array([self.center[0] + self.radius * math.cos(a),
                         self.center[1] + self.radius * math.sin(a),
                         self.height])

    def velocity(self, t):
        a = self.angular_rate * t
        rw = self.radius * self.angular_rate
        return np.array([-rw * math.sin(a), rw * math.cos(a), 0.0])

    def acceleration(self, t):
        a = self.angular_rate * t
        rw2 = self.radius * self.angular_rate**2
        return np.array([-rw2 * math.cos(a), -rw2 * math.sin(a), 0.0])

    def rotation(self, t):
        """body -> global"""
        return exp_so3([0.0, 0.0, self.angular_rate * t]) @ self._R0

    def angular_velocity_body(self, t):
        return self._R0.T @ np.array([0.0, 0.0, self.angular_rate])


class StationaryTrajectory:
    def __init__(self, position=(0.0, 0.0, 0.0), rotation=None):
        self._p = np.asarray(position, dtype=float)
        self._r = np.asarray(rotation, dtype=float) if rotation is not None \
            else CircleTrajectory._R0.copy()

    def position(self, t):
        return self._p.copy()

    def velocity(self, t):
        return np.zeros(3)

    def acceleration(self, t):
        return np.zeros(3)

    def rotation(self, t):
        return self._r.copy()

    def angular_velocity_body(self, t):
        return np.zeros(3)


class LineTrajectory:
    """Constant-velocity straight line, camera looking along the motion."""

    def __init__(self, start=(0.0, 0.0, 0.0), velocity=(0.0, 0.5, 0.0)):
        self._p0 = np.asarray(start, dtype=float)
        self._v = np.asarray(velocity, dtype=float)
        fwd = self._v / np.linalg.norm(self._v)
        down = np.array([0.0, 0.0, -1.0])
        right = np.cross(down, fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        self._r = np.stack([right, down, fwd], axis=1)  # body -> global

    def position(self, t):
        return self._p0 + t * self._v

    def velocity(self, t):
        return self._v.copy()

    def acceleration(self, t):
        return np.zeros(3)

    def rotation(self, t):
        return self._r.copy()

    def angular_velocity_body(self, t):
        return np.zeros(3)


# ------------------------------------------------------------- scenario


@dataclass
class SimScenario:
    trajectory: object
    duration: float = 10.0
    imu_rate: float = 200.0
    frame_rate: float = 20.0
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pixel_sigma: float = 0.0
    imu_noise: ImuNoise = ImuNoise()
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    calibration: CalibrationSet = field(default_factory=default_sim_calibration)
    sampling: str = "interval"
    gnss_rate: float = 0.0
    gnss_sigma_pos: float = 0.0
    gnss_sigma_vel: float = 0.0
    gnss_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    gnss_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def world(self) -> WorldParams:
        return WorldParams(gravity=self.gravity)

    def ground_truth_state(self, t, covariance=None) -> FilterState:
        r_bg = self.trajectory.rotation(t)
        return FilterState(
            q=UnitQuaternion.from_matrix(r_bg.T),
            p=self.trajectory.position(t),
            v=self.trajectory.velocity(t),
            b_g=self.gyro_bias.copy(),
            b_a=self.accel_bias.copy(),
            covariance=covariance if covariance is not None else np.zeros((15, 15)),
            timestamp=t,
        )

    def ground_truth_pose(self, t) -> RigidTransform:
        return RigidTransform(self.trajectory.rotation(t), self.trajectory.position(t))


def scatter_landmarks(trajectory, duration, n, seed, calibration=None,
                      depth_range=(1.5, 6.0)) -> np.ndarray:
    """Scatter landmarks in front of the camera along the whole trajectory."""
    calibration = calibration or default_sim_calibration()
    cam = calibration.cameras[0]
    rng = np.random.default_rng(seed)
    pts = []
    while len(pts) < n:
        t = rng.uniform(0.0, duration)
        depth = rng.uniform(*depth_range)
        x = rng.uniform(-0.55, 0.55) * depth
        y = rng.uniform(-0.4, 0.4) * depth
        body_point = calibration.imu_to_cam[0].inverse().apply([x, y, depth])
        pts.append(trajectory.rotation(t) @ body_point + trajectory.position(t))
    return np.asarray(pts)


def make_circle_scenario(duration=10.0, n_landmarks=200, seed=0, radius=2.0,
                         angular_rate=0.6, imu_rate=200.0, frame_rate=20.0,
                         pixel_sigma=0.0, imu_noise=ImuNoise(), **kwargs) -> SimScenario:
    trajectory = CircleTrajectory(radius=radius, angular_rate=angular_rate)
    landmarks = scatter_landmarks(trajectory, duration, n_landmarks, seed)
    return SimScenario(trajectory=trajectory, duration=duration, imu_rate=imu_rate,
                       frame_rate=frame_rate, landmarks=landmarks,
                       pixel_sigma=pixel_sigma, imu_noise=imu_noise, **kwargs)


def make_stationary_scenario(duration=5.0, n_landmarks=80, seed=0, **kwargs) -> SimScenario:
    trajectory = StationaryTrajectory()
    landmarks = scatter_landmarks(trajectory, duration, n_landmarks, seed)
    return SimScenario(trajectory=trajectory, duration=duration, landmarks=landmarks,
                       **kwargs)


def make_line_scenario(duration=8.0, n_landmarks=150, seed=0,
                       velocity=(0.0, 0.5, 0.0), **kwargs) -> SimScenario:
    trajectory = LineTrajectory(velocity=velocity)
    landmarks = scatter_landmarks(trajectory, duration, n_landmarks, seed)
    return SimScenario(trajectory=trajectory, duration=duration, landmarks=landmarks,
                       **kwargs)


# ------------------------------------------------------------- simulation


@dataclass
class SimResult:
    scenario: SimScenario
    stream: SensorStream
    ground_truth: Trajectory
    gnss: list
    initial_state: FilterState


def frame_observations(scenario: SimScenario, t, rng=None):
    """Project every visible landmark into both cameras at time t."""
    calib = scenario.calibration
    pose = scenario.ground_truth_pose(t)
    r_gb = pose.rotation.T
    obs = []
    for cam_idx in (0, 1):
        cam = calib.cameras[cam_idx]
        to_cam = calib.imu_to_cam[cam_idx]
        for lm_id, lm in enumerate(scenario.landmarks):
            x_cam = to_cam.apply(r_gb @ (lm - pose.translation))
            if x_cam[2] <= 0.3:
                continue
            try:
                uv = project(cam, x_cam)
            except BehindCamera:
                continue
            if scenario.pixel_sigma and rng is not None:
                uv = uv + rng.normal(size=2) * scenario.pixel_sigma
            if not cam.contains(uv):
                continue
            obs.append(FrameObservation(landmark_id=lm_id, camera_index=cam_idx, pixel=uv))
    return obs


def render_frame(scenario: SimScenario, t, blob_sigma=1.2):
    """Low-fidelity render: each visible landmark becomes a bright Gaussian
    blob (intensity keyed to its id) on a black background. Enough structure
    for the image front-end to detect, track, and describe."""
    calib = scenario.calibration
    images = []
    for cam_idx in (0, 1):
        cam = calib.cameras[cam_idx]
        img = np.zeros((cam.height, cam.width), dtype=np.float64)
        for o in frame_observations(scenario, t):
            if o.camera_index != cam_idx:
                continue
            u0, v0 = o.pixel
            intensity = 140 + (o.landmark_id * 37) % 110
            r = 4
            us = np.arange(int(u0) - r, int(u0) + r + 1)
            vs = np.arange(int(v0) - r, int(v0) + r + 1)
            us = us[(us >= 0) & (us < cam.width)]
            vs = vs[(vs >= 0) & (vs < cam.height)]
            if len(us) == 0 or len(vs) == 0:
                continue
            gu, gv = np.meshgrid(us, vs)
            blob = intensity * np.exp(-((gu - u0) ** 2 + (gv - v0) ** 2)
                                      / (2 * blob_sigma**2))
            img[gv, gu] = np.maximum(img[gv, gu], blob)
        images.append(np.clip(img, 0, 255).astype(np.uint8))
    return images[0], images[1]


def simulate(scenario: SimScenario, seed=0, render=False) -> SimResult:
    """Generate the full sensor suite for a scenario, deterministically."""
    rng = np.random.default_rng(seed)
    traj = scenario.trajectory
    g = scenario.gravity
    stream = SensorStream()

    n_imu = int(round(scenario.duration * scenario.imu_rate))
    dt = 1.0 / scenario.imu_rate
    sqrt_dt = math.sqrt(dt)
    noise = scenario.imu_noise
    b_g = scenario.gyro_bias.astype(float).copy()
    b_a = scenario.accel_bias.astype(float).copy()
    for k in range(1, n_imu + 1):
        t1 = k * dt
        t0 = t1 - dt
        if scenario.sampling == "interval":
            r0 = traj.rotation(t0)
            r1 = traj.rotation(t1)
            w = log_so3(r0.T @ r1) / dt
            dv = traj.velocity(t1) - traj.velocity(t0)
            a = r1.T @ (dv / dt - g)
        elif scenario.sampling == "instantaneous":
            w = traj.angular_velocity_body(t1)
            a = traj.rotation(t1).T @ (traj.acceleration(t1) - g)
        else:
            raise ValueError(f"unknown sampling mode {scenario.sampling!r}")
        if noise.gyro_walk:
            b_g = b_g + rng.normal(size=3) * noise.gyro_walk * sqrt_dt
        if noise.accel_walk:
            b_a = b_a + rng.normal(size=3) * noise.accel_walk * sqrt_dt
        w = w + b_g
        a = a + b_a
        if noise.gyro_density:
            w = w + rng.normal(size=3) * noise.gyro_density / sqrt_dt
        if noise.accel_density:
            a = a + rng.normal(size=3) * noise.accel_density / sqrt_dt
        stream.imu.append(ImuSample(timestamp=t1, angular_velocity=w,
                                    linear_acceleration=a))

    n_frames = int(round(scenario.duration * scenario.frame_rate))
    gt_ts, gt_poses = [], []
    for j in range(n_frames + 1):
        t = j / scenario.frame_rate
        if t > scenario.duration + 1e-12:
            break
        frame = StereoFramePair(timestamp=t,
                                observations=frame_observations(scenario, t, rng))
        if render:
            frame.left_image, frame.right_image = render_frame(scenario, t)
        stream.frames.append(frame)
        gt_ts.append(t)
        gt_poses.append(scenario.ground_truth_pose(t))
    ground_truth = Trajectory(np.array(gt_ts), gt_poses, frame="world")

    gnss = []
    if scenario.gnss_rate > 0:
        n_gnss = int(round(scenario.duration * scenario.gnss_rate))
        r_gs = scenario.gnss_rotation
        p0 = traj.position(0.0)
        for j in range(n_gnss + 1):
            t = j / scenario.gnss_rate
            if t > scenario.duration + 1e-12:
                break
            p = r_gs @ (traj.position(t) - p0) + scenario.gnss_origin
            v = r_gs @ traj.velocity(t)
            if scenario.gnss_sigma_pos:
                p = p + rng.normal(size=3) * scenario.gnss_sigma_pos
            if scenario.gnss_sigma_vel:
                v = v + rng.normal(size=3) * scenario.gnss_sigma_vel
            gnss.append(GnssMeasurement(timestamp=t, p=p, v=v))

    return SimResult(scenario=scenario, stream=stream, ground_truth=ground_truth,
                     gnss=gnss, initial_state=scenario.ground_truth_state(0.0))
