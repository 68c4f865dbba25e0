"""Rigid-body geometry: unit quaternions, SE(3) poses, camera projection.

Quaternions are stored as numpy arrays [w, x, y, z]. Rotation tangent
vectors are 3-parameter rotation vectors applied on the left:
q_new = exp(delta) * q.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthBelowMinimum

# Depth guard for all projections; avoids division blow-up at the camera plane.
MIN_DEPTH = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------- quaternions

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) / np.linalg.norm(q)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Resolve the double cover: flip sign so that w >= 0."""
    q = quat_normalize(q)
    return -q if q[0] < 0.0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    m00, m11, m22 = R[0, 0], R[1, 1], R[2, 2]
    tr = m00 + m11 + m22
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif m00 >= m11 and m00 >= m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif m11 >= m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_canonical(q)


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Map a rotation vector to a unit quaternion."""
    angle = np.linalg.norm(rotvec)
    if angle < 1e-10:
        # 2nd-order series keeps the map smooth through zero
        q = np.array([1.0 - angle * angle / 8.0,
                      0.5 * rotvec[0], 0.5 * rotvec[1], 0.5 * rotvec[2]])
        return quat_normalize(q)
    axis = rotvec / angle
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_log(q: np.ndarray) -> np.ndarray:
    """Inverse of quat_exp; returns a rotation vector with angle in [0, pi]."""
    q = quat_canonical(q)
    v = q[1:]
    sin_half = np.linalg.norm(v)
    if sin_half < 1e-10:
        return 2.0 * v / q[0]
    half = np.arctan2(sin_half, q[0])
    return v * (2.0 * half / sin_half)


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion, in [0, pi]."""
    return float(np.linalg.norm(quat_log(q)))


def so3_right_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    angle = np.linalg.norm(rotvec)
    K = skew(rotvec)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (np.eye(3)
            - (1.0 - np.cos(angle)) / a2 * K
            + (angle - np.sin(angle)) / (a2 * angle) * (K @ K))


def so3_right_jacobian_inverse(rotvec: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): Log(Exp(phi) Exp(d)) ~ phi + Jr_inv(phi) d."""
    angle = np.linalg.norm(rotvec)
    K = skew(rotvec)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    coeff = 1.0 / (angle * angle) - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


def so3_left_jacobian_inverse(rotvec: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: Log(Exp(d) Exp(phi)) ~ phi + Jl_inv(phi) d."""
    return so3_right_jacobian_inverse(-rotvec)


# ---------------------------------------------------------------------- poses

class Pose:
    """Rigid-body transform: rotation quaternion plus translation.

    Immutable value object. transform_point(p) = R p + t.
    """

    __slots__ = ("q", "t", "_R")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray):
        self.q = quat_normalize(rotation)
        self.t = np.asarray(translation, dtype=float).copy()
        self._R = None

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_matrix(self.q)
        return self._R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying `other` first, then `self`."""
        return Pose(quat_multiply(self.q, other.q),
                    self.rotation_matrix @ other.t + self.t)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.q)
        return Pose(q_inv, -(self.rotation_matrix.T @ self.t))

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.rotation_matrix @ p + self.t

    def retract(self, delta: np.ndarray) -> "Pose":
        """Apply a 6-vector tangent update [dt(3), dtheta(3)] on the left."""
        return Pose(quat_multiply(quat_exp(delta[3:6]), self.q),
                    self.t + delta[0:3])

    def local_delta(self, reference: "Pose") -> np.ndarray:
        """Tangent [dt, dtheta] such that reference.retract(delta) ~ self."""
        return np.concatenate([
            self.t - reference.t,
            quat_log(quat_multiply(self.q, quat_conjugate(reference.q))),
        ])

    def __repr__(self) -> str:
        return f"Pose(q={self.q}, t={self.t})"


def pose_is_close(a: Pose, b: Pose, tol_rot: float = 1e-10, tol_trans: float = 1e-10) -> bool:
    dq = quat_multiply(a.q, quat_conjugate(b.q))
    return quat_angle(dq) <= tol_rot and np.linalg.norm(a.t - b.t) <= tol_trans


@dataclass(frozen=True)
class Extrinsics:
    """Fixed camera mounting: body_from_camera transform. Not estimated."""

    body_from_camera: Pose

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(Pose.identity())


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def camera_pose(world_from_body: Pose, ext: Extrinsics) -> Pose:
    """World-from-camera pose of the camera rigidly attached to the body."""
    return world_from_body.compose(ext.body_from_camera)


def relative_camera_transform(pose_i: Pose, pose_j: Pose, ext: Extrinsics) -> Pose:
    """camera_j-from-camera_i given world-from-body poses at keyframes i and j."""
    cam_i = camera_pose(pose_i, ext)
    cam_j = camera_pose(pose_j, ext)
    return cam_j.inverse().compose(cam_i)


def project_normalized(point_camera: np.ndarray) -> tuple[float, float]:
    """Normalized image coordinates (x/z, y/z) of a camera-frame point."""
    z = point_camera[2]
    if z <= MIN_DEPTH:
        raise DepthBelowMinimum(f"point depth {z} <= {MIN_DEPTH}")
    return float(point_camera[0] / z), float(point_camera[1] / z)
