"""Tightly-coupled visual-inertial tracking with an iterated extended Kalman
filter: IMU state propagation plus measurement updates from 2D-3D
correspondences.

The filter is error-state (multiplicative on SO(3)) with a 15-dim error
vector ordered [dtheta, dp, dv, dba, dbg]. The attitude error is defined on
the body-to-global rotation, right-multiplicative in the body frame:
R_true = R_est @ exp(skew(dtheta)). The filter is single-owner: exactly one
thread mutates it; FilterState snapshots are treated as immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .errors import (
    AllMeasurementsRejected,
    BehindCamera,
    ExcessiveGap,
    NonMonotonicTimestamp,
)
from .geometry import (
    CameraModel,
    RigidTransform,
    UnitQuaternion,
    WorldParams,
    exp_so3,
    log_so3,
    project,
    project_jacobian,
    right_jacobian_so3,
    skew,
)

STATE_DIM = 15
THETA = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)

MAX_IMU_GAP = 0.05  # seconds

# 95% gate for a 2-dof pixel residual
CHI2_GATE_2DOF = float(chi2.ppf(0.95, 2))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray  # rad/s, body frame
    linear_acceleration: np.ndarray  # m/s^2, specific force, body frame

    def __post_init__(self):
        object.__setattr__(self, "angular_velocity",
                           np.asarray(self.angular_velocity, dtype=float).reshape(3))
        object.__setattr__(self, "linear_acceleration",
                           np.asarray(self.linear_acceleration, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities (units per sqrt(Hz))."""

    gyro_density: float = 0.0
    accel_density: float = 0.0
    gyro_walk: float = 0.0
    accel_walk: float = 0.0


@dataclass(frozen=True)
class CalibrationSet:
    """Stereo rig calibration: intrinsics, IMU->camera extrinsics, IMU noise,
    and the constant camera-IMU time offset (applied at ingestion, not
    estimated online)."""

    cameras: tuple  # (CameraModel, CameraModel)
    imu_to_cam: tuple  # (RigidTransform, RigidTransform), p_cam = R p_imu + t
    imu_noise: ImuNoise = ImuNoise()
    time_offset: float = 0.0

    def __post_init__(self):
        if len(self.cameras) != 2 or len(self.imu_to_cam) != 2:
            raise ValueError("calibration needs exactly two cameras")

    @property
    def baseline(self) -> float:
        rel = self.imu_to_cam[1].compose(self.imu_to_cam[0].inverse())
        return float(np.linalg.norm(rel.translation))


@dataclass(frozen=True)
class FilterState:
    """IMU state: attitude (global->body quaternion), position and velocity of
    the body in the global frame, accel/gyro biases, and the 15x15 covariance
    of the error state [dtheta, dp, dv, dba, dbg]."""

    q: UnitQuaternion
    p: np.ndarray
    v: np.ndarray
    b_g: np.ndarray
    b_a: np.ndarray
    covariance: np.ndarray
    timestamp: float

    def __post_init__(self):
        for name in ("p", "v", "b_g", "b_a"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "covariance",
                           np.asarray(self.covariance, dtype=float).reshape(STATE_DIM, STATE_DIM))

    @staticmethod
    def initial(q=None, p=None, v=None, b_g=None, b_a=None, covariance=None, timestamp=0.0):
        return FilterState(
            q=q if q is not None else UnitQuaternion.identity(),
            p=p if p is not None else np.zeros(3),
            v=v if v is not None else np.zeros(3),
            b_g=b_g if b_g is not None else np.zeros(3),
            b_a=b_a if b_a is not None else np.zeros(3),
            covariance=covariance if covariance is not None else np.zeros((STATE_DIM, STATE_DIM)),
            timestamp=timestamp,
        )

    def rotation_body_to_global(self) -> np.ndarray:
        return self.q.to_matrix().T

    def pose_global_to_body(self) -> RigidTransform:
        r = self.q.to_matrix()
        return RigidTransform(r, -r @ self.p)

    def boxplus(self, delta) -> "FilterState":
        """Inject an error vector: attitude right-multiplicatively, the rest
        additively. Covariance and timestamp are carried unchanged."""
        delta = np.asarray(delta, dtype=float).reshape(STATE_DIM)
        r_bg = self.rotation_body_to_global() @ exp_so3(delta[THETA])
        return replace(
            self,
            q=UnitQuaternion.from_matrix(r_bg.T),
            p=self.p + delta[POS],
            v=self.v + delta[VEL],
            b_a=self.b_a + delta[BA],
            b_g=self.b_g + delta[BG],
        )

    def boxminus(self, other: "FilterState") -> np.ndarray:
        """Error vector delta with self == other.boxplus(delta)."""
        delta = np.empty(STATE_DIM)
        delta[THETA] = log_so3(other.rotation_body_to_global().T @ self.rotation_body_to_global())
        delta[POS] = self.p - other.p
        delta[VEL] = self.v - other.v
        delta[BA] = self.b_a - other.b_a
        delta[BG] = self.b_g - other.b_g
        return delta


@dataclass(frozen=True)
class Correspondence:
    """One 2D measurement of a known 3D point."""

    pixel: np.ndarray
    point_global: np.ndarray
    camera_index: int = 0
    pixel_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        object.__setattr__(self, "point_global",
                           np.asarray(self.point_global, dtype=float).reshape(3))
        if self.pixel_sigma <= 0:
            raise ValueError("pixel_sigma must be positive")


def _symmetrize(m):
    return 0.5 * (m + m.T)


def propagation_jacobian(state: FilterState, sample: ImuSample, dt: float) -> np.ndarray:
    """Error-state transition Jacobian of the discrete mean propagation."""
    w = sample.angular_velocity - state.b_g
    a = sample.linear_acceleration - state.b_a
    theta = w * dt
    a_inc = exp_so3(theta)
    jr = right_jacobian_so3(theta)
    r_new = state.rotation_body_to_global() @ a_inc  # body->global after the step
    ra_cross = r_new @ skew(a)

    f = np.eye(STATE_DIM)
    f[THETA, THETA] = a_inc.T
    f[THETA, BG] = -jr * dt
    f[VEL, THETA] = -dt * ra_cross @ a_inc.T
    f[VEL, BA] = -dt * r_new
    f[VEL, BG] = dt * dt * ra_cross @ jr
    f[POS, THETA] = 0.5 * dt * f[VEL, THETA]
    f[POS, VEL] = dt * np.eye(3)
    f[POS, BA] = 0.5 * dt * f[VEL, BA]
    f[POS, BG] = 0.5 * dt * f[VEL, BG]
    return f


def _process_noise(state, sample, dt, noise: ImuNoise):
    """First-order discretization: G @ diag(densities^2)/dt @ G.T with the
    same input channels as the bias columns of the transition Jacobian."""
    theta = (sample.angular_velocity - state.b_g) * dt
    jr = right_jacobian_so3(theta)
    r_new = state.rotation_body_to_global() @ exp_so3(theta)
    g = np.zeros((STATE_DIM, 12))
    g[THETA, 0:3] = -jr * dt
    g[POS, 3:6] = -0.5 * dt * dt * r_new
    g[VEL, 3:6] = -dt * r_new
    g[BA, 6:9] = dt * np.eye(3)
    g[BG, 9:12] = dt * np.eye(3)
    dens = np.array([noise.gyro_density] * 3 + [noise.accel_density] * 3
                    + [noise.accel_walk] * 3 + [noise.gyro_walk] * 3)
    return g @ np.diag(dens * dens / dt) @ g.T


def propagate(state: FilterState, sample: ImuSample, world: WorldParams,
              noise: ImuNoise | None = None) -> FilterState:
    """Propagate mean and covariance to the sample's timestamp.

    The mean follows the discrete kinematic update exactly: the attitude
    increment is exp((w - bg) dt); dv = (R_new (a - ba) + g) dt; v += dv;
    p += v_old dt + dv dt / 2. Biases are constant in the mean. Covariance
    uses the error-state transition Jacobian plus additive discrete noise.
    """
    dt = sample.timestamp - state.timestamp
    if dt <= 0:
        raise NonMonotonicTimestamp(
            f"sample at {sample.timestamp} not after state at {state.timestamp}")
    if dt > MAX_IMU_GAP:
        raise ExcessiveGap(f"dt = {dt:.4f} s exceeds {MAX_IMU_GAP} s")

    w = sample.angular_velocity - state.b_g
    a = sample.linear_acceleration - state.b_a
    r_inc = exp_so3(w * dt)
    r_new = state.rotation_body_to_global() @ r_inc
    dv = (r_new @ a + world.gravity) * dt
    v_new = state.v + dv
    p_new = state.p + state.v * dt + 0.5 * dv * dt

    f = propagation_jacobian(state, sample, dt)
    cov = f @ state.covariance @ f.T
    if noise is not None:
        cov = cov + _process_noise(state, sample, dt, noise)

    return FilterState(
        q=UnitQuaternion.from_matrix(r_new.T),
        p=p_new,
        v=v_new,
        b_g=state.b_g,
        b_a=state.b_a,
        covariance=_symmetrize(cov),
        timestamp=sample.timestamp,
    )


def reprojection_residual(state: FilterState, c: Correspondence,
                          calib: CalibrationSet):
    """Reprojection residual (measured - predicted pixel) and its 2x15
    Jacobian w.r.t. the error state. Raises BehindCamera when the point maps
    to non-positive depth; callers discard such correspondences."""
    cam: CameraModel = calib.cameras[c.camera_index]
    t_bc: RigidTransform = calib.imu_to_cam[c.camera_index]
    r_gb = state.q.to_matrix()
    x_body = r_gb @ (c.point_global - state.p)
    x_cam = t_bc.apply(x_body)
    predicted = project(cam, x_cam)
    residual = c.pixel - predicted

    j_proj = project_jacobian(cam, x_cam)  # 2x3
    h = np.zeros((2, STATE_DIM))
    # d(residual)/d(x_cam) = -j_proj; chain through x_cam = R_bc x_body + t
    h[:, THETA] = -j_proj @ t_bc.rotation @ skew(x_body)
    h[:, POS] = j_proj @ t_bc.rotation @ r_gb
    return residual, h


@dataclass
class UpdateResult:
    state: FilterState
    accepted: int
    rejected: int
    iterations: int
    all_rejected: bool


def update(state: FilterState, correspondences, calib: CalibrationSet,
           max_iterations=5, tol=1e-6) -> UpdateResult:
    """Iterated EKF measurement update from stacked reprojection residuals.

    Correspondences are gated individually with a 95% chi-square test on the
    prior linearization before inclusion; points behind the camera are
    discarded. The update relinearizes up to `max_iterations` times and stops
    once the state increment norm drops below `tol`. The covariance update is
    in Joseph form, keeping the posterior symmetric PSD. A single
    correspondence is enough to run. If everything is rejected the prior
    state is returned with all_rejected set.
    """
    if len(correspondences) == 0:
        raise ValueError("update needs at least one correspondence")

    cov = state.covariance
    usable = []
    for c in correspondences:
        try:
            r, h = reprojection_residual(state, c, calib)
        except BehindCamera:
            continue
        s = h @ cov @ h.T + (c.pixel_sigma**2) * np.eye(2)
        mahal = float(r @ np.linalg.solve(s, r))
        if mahal <= CHI2_GATE_2DOF:
            usable.append(c)
    rejected = len(correspondences) - len(usable)
    if not usable:
        return UpdateResult(state=state, accepted=0, rejected=rejected,
                            iterations=0, all_rejected=True)

    n = len(usable)
    r_diag = np.repeat([c.pixel_sigma**2 for c in usable], 2)
    current = state
    error = np.zeros(STATE_DIM)  # current boxminus prior
    kalman = None
    h_stack = np.zeros((2 * n, STATE_DIM))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        residuals = np.zeros(2 * n)
        for i, c in enumerate(usable):
            try:
                r, h = reprojection_residual(current, c, calib)
            except BehindCamera:
                r, h = np.zeros(2), np.zeros((2, STATE_DIM))
            residuals[2 * i:2 * i + 2] = r
            h_stack[2 * i:2 * i + 2] = h
        s = h_stack @ cov @ h_stack.T + np.diag(r_diag)
        kalman = cov @ h_stack.T @ np.linalg.inv(s)
        # h_stack is d(residual)/d(error) = -d(prediction)/d(error), hence the
        # sign relative to the textbook innovation form
        new_error = kalman @ (h_stack @ error - residuals)
        step = np.linalg.norm(new_error - error)
        error = new_error
        current = state.boxplus(error)
        if step < tol:
            break

    joseph = np.eye(STATE_DIM) - kalman @ h_stack
    cov_post = joseph @ cov @ joseph.T + kalman @ np.diag(r_diag) @ kalman.T
    posterior = replace(current, covariance=_symmetrize(cov_post))
    return UpdateResult(state=posterior, accepted=n, rejected=rejected,
                        iterations=iterations, all_rejected=False)
