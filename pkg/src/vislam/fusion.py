"""Loosely-coupled centralized EKF fusing the SLAM pose stream with an
external global sensor (GNSS-style), plus offline frame alignment.

The fused state is [p, v, psi] (9x1): position, velocity, and axis-angle
orientation, expressed in the external sensor's global frame. Propagation is
constant-velocity; the SLAM update observes the full state rotated into the
SLAM body frame; the GNSS update observes position and velocity directly.

The module is a single-owner state machine: producers push immutable
measurements into a MeasurementBuffer and one consumer applies them in
timestamp order.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateMotion, NonPositiveDt
from .geometry import RigidTransform, exp_so3, log_so3

STATE_DIM = 9
P_SLC = slice(0, 3)
V_SLC = slice(3, 6)
PSI_SLC = slice(6, 9)


def wrap_axis_angle(psi) -> np.ndarray:
    """Re-wrap so the angle stays in [0, pi]."""
    psi = np.asarray(psi, dtype=float)
    angle = float(np.linalg.norm(psi))
    if angle <= math.pi or angle == 0.0:
        return psi
    wrapped = angle % (2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return psi * (wrapped / angle)


@dataclass(frozen=True)
class FusionState:
    p: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    covariance: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("p", "v", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "covariance",
                           np.asarray(self.covariance, dtype=float).reshape(STATE_DIM, STATE_DIM))

    @staticmethod
    def initial(p=None, v=None, psi=None, covariance=None, timestamp=0.0):
        return FusionState(
            p=p if p is not None else np.zeros(3),
            v=v if v is not None else np.zeros(3),
            psi=psi if psi is not None else np.zeros(3),
            covariance=covariance if covariance is not None else np.eye(STATE_DIM),
            timestamp=timestamp,
        )

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.psi])


@dataclass(frozen=True)
class SlamMeasurement:
    timestamp: float
    p: np.ndarray
    v: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))


@dataclass(frozen=True)
class GnssMeasurement:
    timestamp: float
    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("p", "v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))


@dataclass(frozen=True)
class FusionConfig:
    """Noise covariances and the GNSS->SLAM-body rotation.

    process_noise is a per-second rate: each propagation adds process_noise*dt,
    keeping the tuning independent of update cadence.
    """

    process_noise: np.ndarray = field(default_factory=lambda: np.diag(
        [0.01] * 3 + [0.1] * 3 + [0.01] * 3))
    slam_noise: np.ndarray = field(default_factory=lambda: np.diag(
        [0.01**2] * 3 + [0.05**2] * 3 + [0.01**2] * 3))
    gnss_noise: np.ndarray = field(default_factory=lambda: np.diag(
        [0.5**2] * 3 + [0.1**2] * 3))
    rotation_gnss_to_slam: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "process_noise",
                           np.asarray(self.process_noise, dtype=float).reshape(9, 9))
        object.__setattr__(self, "slam_noise",
                           np.asarray(self.slam_noise, dtype=float).reshape(9, 9))
        object.__setattr__(self, "gnss_noise",
                           np.asarray(self.gnss_noise, dtype=float).reshape(6, 6))
        object.__setattr__(self, "rotation_gnss_to_slam",
                           np.asarray(self.rotation_gnss_to_slam, dtype=float).reshape(3, 3))


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[P_SLC, V_SLC] = dt * np.eye(3)
    return f


def _symmetrize(m):
    return 0.5 * (m + m.T)


def fusion_propagate(state: FusionState, dt: float, cfg: FusionConfig) -> FusionState:
    """Constant-velocity propagation: p += dt v; v and psi carry over."""
    if dt <= 0:
        raise NonPositiveDt(f"dt = {dt}")
    f = transition_matrix(dt)
    cov = f @ state.covariance @ f.T + cfg.process_noise * dt
    return FusionState(p=state.p + dt * state.v, v=state.v, psi=state.psi,
                       covariance=_symmetrize(cov), timestamp=state.timestamp + dt)


def _kalman_update(state, h, innovation, meas_noise):
    cov = state.covariance
    s = h @ cov @ h.T + meas_noise
    gain = cov @ h.T @ np.linalg.inv(s)
    delta = gain @ innovation
    joseph = np.eye(STATE_DIM) - gain @ h
    new_cov = joseph @ cov @ joseph.T + gain @ meas_noise @ gain.T
    return FusionState(
        p=state.p + delta[P_SLC],
        v=state.v + delta[V_SLC],
        psi=wrap_axis_angle(state.psi + delta[PSI_SLC]),
        covariance=_symmetrize(new_cov),
        timestamp=state.timestamp,
    )


def fusion_update_slam(state: FusionState, meas: SlamMeasurement,
                       cfg: FusionConfig) -> FusionState:
    """Full-state update: the observation matrix applies the GNSS->SLAM-body
    rotation block-diagonally to [p, v, psi].

    The orientation innovation is computed on SO(3) as log(R_meas R_pred^T)
    rather than by raw axis-angle subtraction, which is equivalent to first
    order but free of wrap discontinuities.
    """
    r = cfg.rotation_gnss_to_slam
    h = np.zeros((9, STATE_DIM))
    h[0:3, P_SLC] = r
    h[3:6, V_SLC] = r
    h[6:9, PSI_SLC] = r
    rot_residual = log_so3(exp_so3(meas.psi) @ exp_so3(r @ state.psi).T)
    innovation = np.concatenate([
        meas.p - r @ state.p,
        meas.v - r @ state.v,
        rot_residual,
    ])
    return _kalman_update(state, h, innovation, cfg.slam_noise)


def fusion_update_gnss(state: FusionState, meas: GnssMeasurement,
                       cfg: FusionConfig) -> FusionState:
    """Position/velocity update; psi changes only through cross-covariance."""
    h = np.zeros((6, STATE_DIM))
    h[0:3, P_SLC] = np.eye(3)
    h[3:6, V_SLC] = np.eye(3)
    innovation = np.concatenate([meas.p - state.p, meas.v - state.v])
    return _kalman_update(state, h, innovation, cfg.gnss_noise)


# ---------------------------------------------------------------- alignment


@dataclass(frozen=True)
class FrameAlignment:
    """Result of the offline frame calibration.

    rotation maps SLAM-frame displacements into the external sensor's frame:
    gnss_disp ~ rotation @ slam_disp. Origins are the first paired samples,
    which define both frames' common starting point.
    """

    rotation: np.ndarray
    slam_origin: np.ndarray
    gnss_origin: np.ndarray

    def map_position(self, p_slam) -> np.ndarray:
        return self.rotation @ (np.asarray(p_slam, dtype=float) - self.slam_origin) \
            + self.gnss_origin

    def map_velocity(self, v_slam) -> np.ndarray:
        return self.rotation @ np.asarray(v_slam, dtype=float)


def align_frames(slam_poses, gnss_positions) -> FrameAlignment:
    """Solve the orientation alignment between the SLAM and external frames.

    Origins come from the first pair; the rotation is the closed-form SVD
    solution minimizing sum ||gnss_disp - R slam_disp||^2 over displacement
    pairs, with the determinant sign corrected to +1. Raises DegenerateMotion
    when all displacements are collinear (the rotation about that axis is
    unobservable).
    """
    if len(slam_poses) != len(gnss_positions) or len(slam_poses) < 2:
        raise ValueError("need >= 2 paired samples")
    slam_pos = []
    for pose in slam_poses:
        slam_pos.append(pose.translation if isinstance(pose, RigidTransform)
                        else np.asarray(pose, dtype=float))
    slam_pos = np.asarray(slam_pos, dtype=float)
    gnss_pos = np.asarray(gnss_positions, dtype=float)

    s_disp = slam_pos[1:] - slam_pos[0]
    g_disp = gnss_pos[1:] - gnss_pos[0]
    b = g_disp.T @ s_disp
    u, sing, vt = np.linalg.svd(b)
    if sing[0] < 1e-12 or sing[1] <= 1e-6 * sing[0]:
        raise DegenerateMotion("displacement directions are collinear")
    d = np.sign(np.linalg.det(u @ vt))
    rotation = u @ np.diag([1.0, 1.0, d]) @ vt
    return FrameAlignment(rotation=rotation, slam_origin=slam_pos[0],
                          gnss_origin=gnss_pos[0])


# ---------------------------------------------------------------- reorder buffer


class MeasurementBuffer:
    """Re-sorts out-of-order measurements inside a fixed time window.

    push() accepts any measurement with a .timestamp; pop_ready(now) releases,
    in timestamp order, everything older than now - window. Measurements that
    arrive after their slot has already been released are dropped and counted.
    Ties break on arrival order, so replaying an identical call sequence is
    bit-for-bit reproducible.
    """

    def __init__(self, window=0.05):
        self.window = window
        self.dropped = 0
        self._items = []  # sorted by (timestamp, seq)
        self._seq = 0
        self._watermark = -math.inf

    def __len__(self):
        return len(self._items)

    def push(self, measurement):
        if measurement.timestamp < self._watermark:
            self.dropped += 1
            return False
        bisect.insort(self._items, (measurement.timestamp, self._seq, measurement))
        self._seq += 1
        return True

    def pop_ready(self, now):
        limit = now - self.window
        out = []
        while self._items and self._items[0][0] <= limit:
            ts, _, m = self._items.pop(0)
            self._watermark = max(self._watermark, ts)
            out.append(m)
        return out

    def flush(self):
        out = [m for _, _, m in self._items]
        if self._items:
            self._watermark = max(self._watermark, self._items[-1][0])
        self._items.clear()
        return out
