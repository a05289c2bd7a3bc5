"""Rotation, pose, and camera projection primitives shared by the whole stack.

Conventions (fixed once, used everywhere):
  * Quaternions are Hamilton, stored (w, x, y, z), passive, canonicalized to
    w >= 0. `UnitQuaternion.to_matrix` satisfies R(a.multiply(b)) = R(a) @ R(b).
  * A RigidTransform labelled "A -> B" maps point coordinates from frame A to
    frame B: p_B = R @ p_A + t.
  * Camera frames are z-forward, x-right, y-down; pixels are (u, v).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NoConvergence

# Below this angle (rad) exp/log switch to second-order Taylor expansions.
SMALL_ANGLE = 1e-8

# Minimum depth (m) accepted by the projection.
MIN_PROJECTION_DEPTH = 1e-6


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(axis_angle) -> np.ndarray:
    """Axis-angle vector (radians) to rotation matrix (Rodrigues)."""
    theta = np.asarray(axis_angle, dtype=float)
    angle = float(np.linalg.norm(theta))
    s = skew(theta)
    s2 = s @ s
    if angle < SMALL_ANGLE:
        return np.eye(3) + s + 0.5 * s2
    a = math.sin(angle) / angle
    b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * s + b * s2


def log_so3(rotation) -> np.ndarray:
    """Rotation matrix to axis-angle vector with norm in [0, pi].

    The angle-pi case is resolved through the largest diagonal element of the
    symmetric part, which stays well-conditioned where the generic formula's
    sin(angle) denominator vanishes.
    """
    r = np.asarray(rotation, dtype=float)
    trace = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = math.acos(trace)
    if angle < SMALL_ANGLE:
        # vee of the antisymmetric part, second-order accurate near identity
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if math.pi - angle < 1e-6:
        m = 0.5 * (r + r.T)
        cos_a = math.cos(angle)
        outer = (m - cos_a * np.eye(3)) / (1.0 - cos_a)
        i = int(np.argmax(np.diag(outer)))
        axis = np.empty(3)
        axis[i] = math.sqrt(max(outer[i, i], 0.0))
        for j in range(3):
            if j != i:
                axis[j] = outer[i, j] / axis[i]
        axis /= np.linalg.norm(axis)
        # keep sign consistent with the antisymmetric part when it is nonzero
        w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.linalg.norm(w) > 1e-12 and np.dot(w, axis) < 0.0:
            axis = -axis
        return angle * axis
    scale = angle / (2.0 * math.sin(angle))
    return scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def right_jacobian_so3(axis_angle) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp(theta + d) ~ exp(theta) exp(J_r d)."""
    theta = np.asarray(axis_angle, dtype=float)
    angle = float(np.linalg.norm(theta))
    s = skew(theta)
    s2 = s @ s
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + s2 / 6.0
    a2 = angle * angle
    c1 = (1.0 - math.cos(angle)) / a2
    c2 = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * s + c2 * s2


def rotation_angle(rotation) -> float:
    """Angle (rad) of the rotation, in [0, pi]."""
    trace = np.clip((np.trace(np.asarray(rotation)) - 1.0) * 0.5, -1.0, 1.0)
    return math.acos(trace)


def is_rotation(matrix, tol=1e-9) -> bool:
    m = np.asarray(matrix)
    return (
        m.shape == (3, 3)
        and np.allclose(m.T @ m, np.eye(3), atol=tol)
        and abs(np.linalg.det(m) - 1.0) < tol
    )


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z), Hamilton convention, canonical w >= 0."""

    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_wxyz(w, x, y, z) -> "UnitQuaternion":
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n == 0.0:
            raise ValueError("zero quaternion cannot be normalized")
        sign = -1.0 if w < 0.0 else 1.0
        s = sign / n
        return UnitQuaternion(w * s, x * s, y * s, z * s)

    @staticmethod
    def from_axis_angle(axis_angle) -> "UnitQuaternion":
        theta = np.asarray(axis_angle, dtype=float)
        angle = float(np.linalg.norm(theta))
        if angle < SMALL_ANGLE:
            half = 0.5 * theta
            return UnitQuaternion.from_wxyz(1.0, half[0], half[1], half[2])
        axis = theta / angle
        s = math.sin(0.5 * angle)
        return UnitQuaternion.from_wxyz(math.cos(0.5 * angle), *(s * axis))

    @staticmethod
    def from_matrix(rotation) -> "UnitQuaternion":
        """Shepperd's method: branch on the largest of (w, x, y, z)."""
        r = np.asarray(rotation, dtype=float)
        t = np.trace(r)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            return UnitQuaternion.from_wxyz(
                0.25 * s,
                (r[2, 1] - r[1, 2]) / s,
                (r[0, 2] - r[2, 0]) / s,
                (r[1, 0] - r[0, 1]) / s,
            )
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            return UnitQuaternion.from_wxyz(
                (r[2, 1] - r[1, 2]) / s, 0.25 * s,
                (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s,
            )
        if i == 1:
            s = math.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            return UnitQuaternion.from_wxyz(
                (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                0.25 * s, (r[1, 2] + r[2, 1]) / s,
            )
        s = math.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        return UnitQuaternion.from_wxyz(
            (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
            (r[1, 2] + r[2, 1]) / s, 0.25 * s,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """Hamilton product; R(a.multiply(b)) = R(a) @ R(b)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion.from_wxyz(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v) -> np.ndarray:
        return self.to_matrix() @ np.asarray(v, dtype=float)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid transform p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=float)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with radial-tangential distortion (k1, k2, p1, p2)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if len(self.distortion) != 4:
            raise ValueError("distortion must be (k1, k2, p1, p2)")

    def contains(self, pixel, margin=0.0) -> bool:
        u, v = pixel
        return (margin <= u <= self.width - 1 - margin) and (
            margin <= v <= self.height - 1 - margin
        )


def _distort(cam: CameraModel, xn) -> np.ndarray:
    k1, k2, p1, p2 = cam.distortion
    x, y = xn
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    return np.array(
        [
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        ]
    )


def _distort_jacobian(cam: CameraModel, xn) -> np.ndarray:
    k1, k2, p1, p2 = cam.distortion
    x, y = xn
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    d_radial = 2.0 * k1 + 4.0 * k2 * r2  # d(radial)/d(r2)
    return np.array(
        [
            [
                radial + x * d_radial * x + 2.0 * p1 * y + 6.0 * p2 * x,
                x * d_radial * y + 2.0 * p1 * x + 2.0 * p2 * y,
            ],
            [
                y * d_radial * x + 2.0 * p1 * x + 2.0 * p2 * y,
                radial + y * d_radial * y + 6.0 * p1 * y + 2.0 * p2 * x,
            ],
        ]
    )


def project(cam: CameraModel, point_camera_frame) -> np.ndarray:
    """Project a camera-frame 3D point to pixel coordinates.

    Raises BehindCamera when depth <= MIN_PROJECTION_DEPTH. The result may lie
    outside the image bounds; the caller gates.
    """
    p = np.asarray(point_camera_frame, dtype=float)
    if p[2] <= MIN_PROJECTION_DEPTH:
        raise BehindCamera(f"depth {p[2]:.3g} <= {MIN_PROJECTION_DEPTH}")
    xd = _distort(cam, p[:2] / p[2])
    return np.array([cam.fx * xd[0] + cam.cx, cam.fy * xd[1] + cam.cy])


def project_jacobian(cam: CameraModel, point_camera_frame) -> np.ndarray:
    """2x3 Jacobian of project() w.r.t. the camera-frame point."""
    p = np.asarray(point_camera_frame, dtype=float)
    if p[2] <= MIN_PROJECTION_DEPTH:
        raise BehindCamera(f"depth {p[2]:.3g} <= {MIN_PROJECTION_DEPTH}")
    x, y, z = p
    inv_z = 1.0 / z
    j_norm = np.array([[inv_z, 0.0, -x * inv_z * inv_z], [0.0, inv_z, -y * inv_z * inv_z]])
    j_dist = _distort_jacobian(cam, p[:2] * inv_z)
    return np.diag([cam.fx, cam.fy]) @ j_dist @ j_norm


def unproject(cam: CameraModel, pixel) -> np.ndarray:
    """Pixel to unit bearing vector in the camera frame.

    Distortion is inverted by fixed-point iteration (at most 20 rounds);
    raises NoConvergence if the residual stays above 1e-9 in normalized
    coordinates. With all-zero coefficients the closed form is returned.
    """
    u, v = np.asarray(pixel, dtype=float)
    xd = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy])
    if any(cam.distortion):
        k1, k2, p1, p2 = cam.distortion
        x = xd.copy()
        for _ in range(20):
            r2 = float(x @ x)
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            tangential = np.array(
                [
                    2.0 * p1 * x[0] * x[1] + p2 * (r2 + 2.0 * x[0] * x[0]),
                    p1 * (r2 + 2.0 * x[1] * x[1]) + 2.0 * p2 * x[0] * x[1],
                ]
            )
            x_next = (xd - tangential) / radial
            step = float(np.max(np.abs(x_next - x)))
            x = x_next
            if step < 1e-14:
                break
        if float(np.max(np.abs(_distort(cam, x) - xd))) > 1e-9:
            raise NoConvergence(f"undistortion stalled for pixel ({u}, {v})")
        xd = x
    bearing = np.array([xd[0], xd[1], 1.0])
    return bearing / np.linalg.norm(bearing)


@dataclass(frozen=True)
class WorldParams:
    """Global-frame constants; gravity points along -z by default."""

    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        g = np.array(self.gravity, dtype=float).reshape(3)
        object.__setattr__(self, "gravity", g)
        n = np.linalg.norm(g)
        if n != 0.0 and not (9.7 <= n <= 9.9):
            raise ValueError(f"|gravity| = {n:.4f} outside [9.7, 9.9] (use 0 for test mode)")
