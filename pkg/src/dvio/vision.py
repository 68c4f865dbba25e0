"""Depth-augmented visual residuals for 1D and 3D feature parameterizations.

A landmark is expressed in its anchor keyframe. The 1D state is the inverse
depth along the anchor optical axis; the 3D state adds the estimated
normalized image location in the anchor frame. Residuals compare predicted
normalized coordinates and predicted inverse depth against the measured
ones; the inverse-depth component is dropped when the measurement fell in a
depth-map hole.

Residual component order is always (u, v, inverse depth).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import (MissingDepth, ModeMismatch, PointBehindCamera,
                     ShiftedDepthInvalid, ZeroTimeDelta)

MIN_DEPTH = geo.MIN_DEPTH
MAX_DEPTH = 1e3


@dataclass(frozen=True)
class Observation:
    """One landmark sighting: normalized coordinates plus optional depth.

    An absent depth (a hole in the depth map) is depth=None, never a
    sentinel value.
    """

    keyframe_index: int
    u: float
    v: float
    depth: float | None
    timestamp: float

    def __post_init__(self):
        if self.depth is not None and not (MIN_DEPTH < self.depth < MAX_DEPTH):
            raise ValueError(f"depth {self.depth} outside ({MIN_DEPTH}, {MAX_DEPTH})")

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass
class Landmark1D:
    """Inverse-depth feature state anchored at its first observing keyframe."""

    anchor_index: int
    inv_depth: float | None = None
    observations: dict[int, Observation] = field(default_factory=dict)

    @property
    def initialized(self) -> bool:
        return self.inv_depth is not None

    def anchor_observation(self) -> Observation:
        return self.observations[self.anchor_index]


@dataclass
class Landmark3D:
    """Feature state (u, v, inverse depth) in the anchor camera frame."""

    anchor_index: int
    u_anchor: float | None = None
    v_anchor: float | None = None
    inv_depth: float | None = None
    observations: dict[int, Observation] = field(default_factory=dict)

    @property
    def initialized(self) -> bool:
        return self.inv_depth is not None

    def anchor_observation(self) -> Observation:
        return self.observations[self.anchor_index]

    def state_vector(self) -> np.ndarray:
        return np.array([self.u_anchor, self.v_anchor, self.inv_depth])


@dataclass(frozen=True)
class ResidualWeights:
    """Measurement standard deviations and the robust-loss scale.

    sigma_uv is in normalized coordinates (default ~1.5 px at a nominal
    460 px focal length); sigma_inv_depth is the Gaussian inverse-depth
    noise; cauchy_scale applies to whitened residuals.
    """

    sigma_uv: float = 1.5 / 460.0
    sigma_inv_depth: float = 0.01
    cauchy_scale: float = 1.0

    def __post_init__(self):
        if min(self.sigma_uv, self.sigma_inv_depth, self.cauchy_scale) <= 0:
            raise ValueError("residual weights must be strictly positive")

    def whitening(self, with_depth: bool) -> np.ndarray:
        w = [1.0 / self.sigma_uv, 1.0 / self.sigma_uv]
        if with_depth:
            w.append(1.0 / self.sigma_inv_depth)
        return np.array(w)


# ------------------------------------------------------------- core residuals

def back_projection(u: float, v: float, inv_depth: float) -> np.ndarray:
    """Camera-frame point [u, v, 1] / inv_depth."""
    return np.array([u, v, 1.0]) / inv_depth


def _transform_and_compare(p_anchor, obs_j: Observation, cam_j_from_cam_i: geo.Pose):
    p_j = cam_j_from_cam_i.transform_point(p_anchor)
    if p_j[2] <= MIN_DEPTH:
        raise PointBehindCamera(f"transformed depth {p_j[2]} <= {MIN_DEPTH}")
    x, y, z = p_j
    r = [x / z - obs_j.u, y / z - obs_j.v]
    if obs_j.depth is not None:
        r.append(1.0 / z - 1.0 / obs_j.depth)
    return np.array(r)


def residual_nonanchor_1d(landmark: Landmark1D, obs_j: Observation,
                          cam_j_from_cam_i: geo.Pose) -> np.ndarray:
    """Reprojection + inverse-depth residual in a non-anchor keyframe.

    The anchor back-projection uses the measured anchor coordinates scaled
    by the estimated inverse depth. Returns a 2-vector when obs_j has no
    depth measurement.
    """
    anchor = landmark.anchor_observation()
    p_anchor = back_projection(anchor.u, anchor.v, landmark.inv_depth)
    return _transform_and_compare(p_anchor, obs_j, cam_j_from_cam_i)


def residual_anchor_1d(landmark: Landmark1D, obs_anchor: Observation) -> float | None:
    """Inverse-depth residual in the anchor keyframe; None when depth absent."""
    if obs_anchor.depth is None:
        return None
    return landmark.inv_depth - 1.0 / obs_anchor.depth


def residual_nonanchor_3d(landmark: Landmark3D, obs_j: Observation,
                          cam_j_from_cam_i: geo.Pose) -> np.ndarray:
    """Non-anchor residual with the estimated anchor direction."""
    p_anchor = back_projection(landmark.u_anchor, landmark.v_anchor, landmark.inv_depth)
    return _transform_and_compare(p_anchor, obs_j, cam_j_from_cam_i)


def residual_anchor_3d(landmark: Landmark3D, obs_anchor: Observation) -> np.ndarray:
    """Full state-minus-measurement residual in the anchor keyframe."""
    r = [landmark.u_anchor - obs_anchor.u, landmark.v_anchor - obs_anchor.v]
    if obs_anchor.depth is not None:
        r.append(landmark.inv_depth - 1.0 / obs_anchor.depth)
    return np.array(r)


# ------------------------------------------------------- time-offset handling

def feature_velocity(obs_k: Observation, obs_k1: Observation) -> np.ndarray:
    """Forward-difference feature velocity (du/dt, dv/dt, dz/dt)."""
    if obs_k.depth is None or obs_k1.depth is None:
        raise MissingDepth("feature velocity needs depth in both frames")
    dt = obs_k1.timestamp - obs_k.timestamp
    if dt <= 0.0:
        raise ZeroTimeDelta(f"non-positive time delta {dt}")
    return np.array([obs_k1.u - obs_k.u, obs_k1.v - obs_k.v,
                     obs_k1.depth - obs_k.depth]) / dt


def feature_velocity_with_holes(obs_k: Observation, obs_k1: Observation) -> np.ndarray:
    """Velocity with the depth component zeroed when either depth is a hole."""
    if obs_k.depth is None or obs_k1.depth is None:
        dt = obs_k1.timestamp - obs_k.timestamp
        if dt <= 0.0:
            raise ZeroTimeDelta(f"non-positive time delta {dt}")
        return np.array([obs_k1.u - obs_k.u, obs_k1.v - obs_k.v, 0.0]) / dt
    return feature_velocity(obs_k, obs_k1)


def shift_observation(obs: Observation, velocity: np.ndarray, t_d: float) -> Observation:
    """Move an observation along its feature velocity by t_d seconds."""
    depth = obs.depth
    if depth is not None:
        depth = depth + t_d * velocity[2]
        if depth <= MIN_DEPTH:
            raise ShiftedDepthInvalid(f"shifted depth {depth} <= {MIN_DEPTH}")
    return Observation(obs.keyframe_index,
                       obs.u + t_d * velocity[0],
                       obs.v + t_d * velocity[1],
                       depth,
                       obs.timestamp + t_d)


def residual_timeshifted(landmark, obs: Observation, cam_j_from_cam_i: geo.Pose | None,
                         velocities: dict[int, np.ndarray], t_d: float,
                         parameterization: str):
    """Residual on time-shifted observations.

    velocities maps keyframe index to the feature velocity used for the
    shift. Measured observations are shifted by t_d; the estimated 3D
    anchor state is never shifted. With t_d = 0 this reduces exactly to
    the unshifted residuals.
    """
    is_anchor = obs.keyframe_index == landmark.anchor_index
    shifted = shift_observation(obs, velocities[obs.keyframe_index], t_d)
    if parameterization == "1d":
        if not isinstance(landmark, Landmark1D):
            raise ModeMismatch("expected a Landmark1D")
        if is_anchor:
            return residual_anchor_1d(landmark, shifted)
        anchor = landmark.anchor_observation()
        anchor_shifted = shift_observation(anchor, velocities[anchor.keyframe_index], t_d)
        moved = Landmark1D(landmark.anchor_index, landmark.inv_depth,
                           {anchor.keyframe_index: anchor_shifted})
        return residual_nonanchor_1d(moved, shifted, cam_j_from_cam_i)
    if parameterization == "3d":
        if not isinstance(landmark, Landmark3D):
            raise ModeMismatch("expected a Landmark3D")
        if is_anchor:
            return residual_anchor_3d(landmark, shifted)
        return residual_nonanchor_3d(landmark, shifted, cam_j_from_cam_i)
    raise ModeMismatch(f"unknown parameterization {parameterization!r}")


# ------------------------------------------------------------------ robust loss

def cauchy_loss(squared_norm: float, scale: float) -> tuple[float, float, float]:
    """Cauchy robust loss c^2 log(1 + s/c^2) with first two derivatives."""
    c2 = scale * scale
    x = squared_norm / c2
    inv = 1.0 / (1.0 + x)
    return c2 * np.log1p(x), inv, -inv * inv / c2


# ----------------------------------------------------------- analytic Jacobians

def projection_jacobian(p: np.ndarray) -> np.ndarray:
    """d(x/z, y/z, 1/z) / d(x, y, z) for a camera-frame point."""
    x, y, z = p
    iz = 1.0 / z
    iz2 = iz * iz
    return np.array([[iz, 0.0, -x * iz2],
                     [0.0, iz, -y * iz2],
                     [0.0, 0.0, -iz2]])


@dataclass(frozen=True)
class FramePairGeometry:
    """Per-(anchor, observer) quantities shared by all landmarks on the pair.

    Poses are world-from-body; the extrinsics fold the fixed camera mount
    into the cached camera-frame transforms.
    """

    R_ji: np.ndarray        # camera_j from camera_i rotation
    t_ji: np.ndarray
    R_ci: np.ndarray        # world from camera_i rotation
    t_ci: np.ndarray
    R_cj_T: np.ndarray      # camera_j from world rotation
    t_body_i: np.ndarray    # world body origins, for pose Jacobians
    t_body_j: np.ndarray

    @classmethod
    def build(cls, pose_i: geo.Pose, pose_j: geo.Pose, ext: geo.Extrinsics):
        cam_i = geo.camera_pose(pose_i, ext)
        cam_j = geo.camera_pose(pose_j, ext)
        R_ci = cam_i.rotation_matrix
        R_cj_T = cam_j.rotation_matrix.T
        return cls(R_ji=R_cj_T @ R_ci,
                   t_ji=R_cj_T @ (cam_i.t - cam_j.t),
                   R_ci=R_ci, t_ci=cam_i.t, R_cj_T=R_cj_T,
                   t_body_i=pose_i.t, t_body_j=pose_j.t)


def nonanchor_residual_jacobians(geom: FramePairGeometry, anchor_u: float,
                                 anchor_v: float, inv_depth: float,
                                 meas_uv: np.ndarray, meas_depth: float | None,
                                 anchor_is_state: bool,
                                 anchor_uv_velocity: np.ndarray | None = None,
                                 meas_velocity: np.ndarray | None = None,
                                 with_jacobians: bool = True):
    """Non-anchor residual with Jacobians for either parameterization.

    anchor_(u, v) and meas_* must already be time-shifted when a time
    offset applies. Returns (r, J_pose_i, J_pose_j, J_landmark, J_td);
    J_landmark is (n, 1) for the 1D state or (n, 3) for the 3D state,
    J_td is None unless a velocity was supplied. Pose tangents are
    [dp, dtheta] with the rotation update applied on the left.
    """
    p_anchor = np.array([anchor_u, anchor_v, 1.0]) / inv_depth
    p_j = geom.R_ji @ p_anchor + geom.t_ji
    z = p_j[2]
    if z <= MIN_DEPTH:
        raise PointBehindCamera(f"transformed depth {z} <= {MIN_DEPTH}")

    with_depth = meas_depth is not None
    n = 3 if with_depth else 2
    iz = 1.0 / z
    r = np.empty(n)
    r[0] = p_j[0] * iz - meas_uv[0]
    r[1] = p_j[1] * iz - meas_uv[1]
    if with_depth:
        r[2] = iz - 1.0 / meas_depth
    if not with_jacobians:
        return r, None, None, None, None

    K = projection_jacobian(p_j)[:n]
    p_world = geom.R_ci @ p_anchor + geom.t_ci
    M = K @ geom.R_cj_T

    J_pose_i = np.empty((n, 6))
    J_pose_i[:, 0:3] = M
    J_pose_i[:, 3:6] = -(M @ geo.skew(p_world - geom.t_body_i))
    J_pose_j = np.empty((n, 6))
    J_pose_j[:, 0:3] = -M
    J_pose_j[:, 3:6] = M @ geo.skew(p_world - geom.t_body_j)

    KR = K @ geom.R_ji
    if anchor_is_state:
        J_landmark = np.empty((n, 3))
        J_landmark[:, 0] = KR[:, 0] / inv_depth
        J_landmark[:, 1] = KR[:, 1] / inv_depth
        J_landmark[:, 2] = KR @ (-p_anchor / inv_depth)
    else:
        J_landmark = (KR @ (-p_anchor / inv_depth)).reshape(n, 1)

    J_td = None
    if meas_velocity is not None:
        J_td = np.zeros(n)
        if anchor_uv_velocity is not None:
            # chain through the shifted anchor measurement
            J_td += KR @ np.array([anchor_uv_velocity[0], anchor_uv_velocity[1], 0.0]) / inv_depth
        J_td[0] -= meas_velocity[0]
        J_td[1] -= meas_velocity[1]
        if with_depth:
            J_td[2] += meas_velocity[2] / (meas_depth * meas_depth)
        J_td = J_td.reshape(n, 1)
    return r, J_pose_i, J_pose_j, J_landmark, J_td


def anchor_residual_jacobians_1d(inv_depth: float, meas_depth: float,
                                 meas_velocity: np.ndarray | None = None):
    """Anchor inverse-depth residual; linear in the state (d/d lambda = 1)."""
    r = np.array([inv_depth - 1.0 / meas_depth])
    J_landmark = np.ones((1, 1))
    J_td = None
    if meas_velocity is not None:
        J_td = np.array([[meas_velocity[2] / (meas_depth * meas_depth)]])
    return r, J_landmark, J_td


def anchor_residual_jacobians_3d(state: np.ndarray, meas_uv: np.ndarray,
                                 meas_depth: float | None,
                                 meas_velocity: np.ndarray | None = None):
    """Anchor residual for the 3D state; identity Jacobian in the state."""
    with_depth = meas_depth is not None
    n = 3 if with_depth else 2
    r = np.empty(n)
    r[0] = state[0] - meas_uv[0]
    r[1] = state[1] - meas_uv[1]
    J_landmark = np.zeros((n, 3))
    J_landmark[0, 0] = 1.0
    J_landmark[1, 1] = 1.0
    if with_depth:
        r[2] = state[2] - 1.0 / meas_depth
        J_landmark[2, 2] = 1.0
    J_td = None
    if meas_velocity is not None:
        J_td = np.zeros((n, 1))
        J_td[0, 0] = -meas_velocity[0]
        J_td[1, 0] = -meas_velocity[1]
        if with_depth:
            J_td[2, 0] = meas_velocity[2] / (meas_depth * meas_depth)
    return r, J_landmark, J_td
