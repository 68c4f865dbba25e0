"""IMU preintegration between consecutive keyframes.

Raw gyro/accel samples are integrated with a mid-point scheme into relative
motion deltas with a 15x15 covariance and first-order bias Jacobians. The
error-state ordering throughout is [dp, dtheta, dv, dba, dbg].

The configured gravity vector is compensated inside the deltas, expressed in
the first-sample body frame, so that a static stream integrates to zero.
Consumers that need the raw kinematic increments (residuals, prediction)
remove that constant term again via gravity_free_deltas().
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import BiasUpdateTooLarge, InsufficientSamples, NonMonotonicTimestamps

# First-order bias correction is only trusted within this bias-change norm.
REPROPAGATION_THRESHOLD = 1e-2
# Sanity bound on bias magnitudes (rad/s, m/s^2).
BIAS_MAX = 1.0

GRAVITY_W = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class SpeedBias:
    """Velocity plus accelerometer/gyro biases of one navigation state."""

    velocity: np.ndarray
    bias_accel: np.ndarray
    bias_gyro: np.ndarray

    @classmethod
    def zero(cls) -> "SpeedBias":
        return cls(np.zeros(3), np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.velocity, self.bias_accel, self.bias_gyro])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "SpeedBias":
        return cls(v[0:3].copy(), v[3:6].copy(), v[6:9].copy())


@dataclass
class ImuNoiseConfig:
    """White-noise densities (unit/sqrt(Hz)) and the compensated gravity."""

    gyro_noise: float = 1e-4
    accel_noise: float = 1e-3
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_W.copy())


@dataclass
class PreintegratedImu:
    """Relative-motion pseudo-measurement between two keyframes.

    delta_p/delta_v include the configured gravity compensation; delta_q is
    the rotation from the first-sample frame to the last-sample frame.
    bias Jacobians are d(delta)/d(bias) at linearization_bias.
    """

    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_q: np.ndarray
    covariance: np.ndarray
    dp_dba: np.ndarray
    dp_dbg: np.ndarray
    dv_dba: np.ndarray
    dv_dbg: np.ndarray
    dq_dbg: np.ndarray
    linearization_bias: SpeedBias
    duration: float
    gravity: np.ndarray

    _sqrt_info: np.ndarray | None = None

    def gravity_free_deltas(self) -> tuple[np.ndarray, np.ndarray]:
        """(delta_p, delta_v) with the baked-in gravity term removed."""
        T = self.duration
        return (self.delta_p - 0.5 * self.gravity * T * T,
                self.delta_v - self.gravity * T)

    def sqrt_information(self) -> np.ndarray:
        """Whitening matrix W with W^T W = covariance^-1 (cached)."""
        if self._sqrt_info is None:
            L = np.linalg.cholesky(self.covariance)
            self._sqrt_info = np.linalg.inv(L)
        return self._sqrt_info


def _check_stream(samples) -> None:
    if len(samples) < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {len(samples)}")
    ts = [s.timestamp for s in samples]
    if any(t1 <= t0 for t0, t1 in zip(ts, ts[1:])):
        raise NonMonotonicTimestamps("IMU timestamps must be strictly increasing")


def integrate(samples, bias: SpeedBias, noise: ImuNoiseConfig) -> PreintegratedImu:
    """Mid-point preintegration of bias-corrected samples.

    The integration runs in the first-sample body frame; noise.gravity is
    treated as the gravity vector expressed in that frame and removed from
    the measured specific force.
    """
    _check_stream(samples)
    ba, bg = bias.bias_accel, bias.bias_gyro
    if np.linalg.norm(ba) > BIAS_MAX or np.linalg.norm(bg) > BIAS_MAX:
        raise ValueError("bias magnitude exceeds sanity bound")
    g = np.asarray(noise.gravity, dtype=float)

    q = np.array([1.0, 0.0, 0.0, 0.0])
    p = np.zeros(3)
    v = np.zeros(3)
    P = np.zeros((15, 15))
    J = np.eye(15)

    sg2 = noise.gyro_noise ** 2
    sa2 = noise.accel_noise ** 2
    sbg2 = noise.gyro_bias_walk ** 2
    sba2 = noise.accel_bias_walk ** 2

    for s0, s1 in zip(samples, samples[1:]):
        dt = s1.timestamp - s0.timestamp
        R0 = geo.quat_to_matrix(q)
        w_mid = 0.5 * (s0.gyro + s1.gyro) - bg
        a0 = s0.accel - ba
        a1 = s1.accel - ba

        q = geo.quat_multiply(q, geo.quat_exp(w_mid * dt))
        q = geo.quat_normalize(q)
        R1 = geo.quat_to_matrix(q)

        acc = 0.5 * (R0 @ a0 + R1 @ a1) + g
        p = p + v * dt + 0.5 * acc * dt * dt
        v = v + acc * dt

        K0 = R0 @ geo.skew(a0)
        K1 = R1 @ geo.skew(a1)
        Wm = geo.skew(w_mid)

        F = np.eye(15)
        F[3:6, 3:6] = np.eye(3) - Wm * dt
        F[3:6, 12:15] = -np.eye(3) * dt
        dv_dtheta = -0.5 * dt * (K0 + K1 @ (np.eye(3) - Wm * dt))
        F[6:9, 3:6] = dv_dtheta
        F[6:9, 9:12] = -0.5 * dt * (R0 + R1)
        F[6:9, 12:15] = 0.5 * dt * dt * K1
        F[0:3, 3:6] = 0.5 * dt * dv_dtheta
        F[0:3, 6:9] = np.eye(3) * dt
        F[0:3, 9:12] = -0.25 * dt * dt * (R0 + R1)
        F[0:3, 12:15] = 0.25 * dt ** 3 * K1

        # noise inputs: [na0, nw0, na1, nw1, nba, nbg]
        V = np.zeros((15, 18))
        V[3:6, 3:6] = 0.5 * dt * np.eye(3)
        V[3:6, 9:12] = 0.5 * dt * np.eye(3)
        V[6:9, 0:3] = 0.5 * dt * R0
        V[6:9, 6:9] = 0.5 * dt * R1
        V[6:9, 3:6] = -0.25 * dt * dt * K1
        V[6:9, 9:12] = -0.25 * dt * dt * K1
        V[0:3, :] = 0.5 * dt * V[6:9, :]
        V[9:12, 12:15] = dt * np.eye(3)
        V[12:15, 15:18] = dt * np.eye(3)

        # continuous densities -> discrete sample variances (sigma^2 / dt)
        Qd = np.repeat([sa2, sg2, sa2, sg2, sba2, sbg2], 3) / dt

        P = F @ P @ F.T + (V * Qd) @ V.T
        P = 0.5 * (P + P.T)
        J = F @ J

    return PreintegratedImu(
        delta_p=p,
        delta_v=v,
        delta_q=geo.quat_canonical(q),
        covariance=P,
        dp_dba=J[0:3, 9:12].copy(),
        dp_dbg=J[0:3, 12:15].copy(),
        dv_dba=J[6:9, 9:12].copy(),
        dv_dbg=J[6:9, 12:15].copy(),
        dq_dbg=J[3:6, 12:15].copy(),
        linearization_bias=SpeedBias(np.zeros(3), ba.copy(), bg.copy()),
        duration=samples[-1].timestamp - samples[0].timestamp,
        gravity=g.copy(),
    )


def bias_delta(pre: PreintegratedImu, new_bias: SpeedBias) -> tuple[np.ndarray, np.ndarray]:
    dba = new_bias.bias_accel - pre.linearization_bias.bias_accel
    dbg = new_bias.bias_gyro - pre.linearization_bias.bias_gyro
    return dba, dbg


def correct_for_bias(pre: PreintegratedImu, new_bias: SpeedBias):
    """First-order delta update for a changed bias estimate.

    Returns (delta_p, delta_v, delta_q). Raises BiasUpdateTooLarge when the
    bias moved beyond the linearization validity region, signalling the
    caller to re-run integrate.
    """
    dba, dbg = bias_delta(pre, new_bias)
    if np.sqrt(np.dot(dba, dba) + np.dot(dbg, dbg)) > REPROPAGATION_THRESHOLD:
        raise BiasUpdateTooLarge("re-integration required")
    return _corrected_deltas(pre, dba, dbg)


def _corrected_deltas(pre: PreintegratedImu, dba: np.ndarray, dbg: np.ndarray):
    dp = pre.delta_p + pre.dp_dba @ dba + pre.dp_dbg @ dbg
    dv = pre.delta_v + pre.dv_dba @ dba + pre.dv_dbg @ dbg
    dq = geo.quat_multiply(pre.delta_q, geo.quat_exp(pre.dq_dbg @ dbg))
    return dp, dv, dq


def compose_preintegrations(a: PreintegratedImu, b: PreintegratedImu) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deltas of the concatenated interval from two consecutive segments.

    Only the deltas are composed (covariance composition is not needed by
    the estimator, which always integrates whole inter-keyframe intervals).
    """
    g = a.gravity
    Ra = geo.quat_to_matrix(a.delta_q)
    pa, va = a.gravity_free_deltas()
    pb, vb = b.gravity_free_deltas()
    T = a.duration + b.duration
    p = pa + va * b.duration + Ra @ pb + 0.5 * g * T * T
    v = va + Ra @ vb + g * T
    q = geo.quat_canonical(geo.quat_multiply(a.delta_q, b.delta_q))
    return p, v, q


def predict_state(pose: geo.Pose, sb: SpeedBias, pre: PreintegratedImu,
                  gravity: np.ndarray) -> tuple[geo.Pose, np.ndarray]:
    """Propagate (pose, velocity) through a preintegrated interval."""
    dp, dv, dq = _corrected_deltas(pre, *bias_delta(pre, sb))
    T = pre.duration
    dp = dp - 0.5 * pre.gravity * T * T
    dv = dv - pre.gravity * T
    R = pose.rotation_matrix
    p_new = pose.t + sb.velocity * T + 0.5 * gravity * T * T + R @ dp
    v_new = sb.velocity + gravity * T + R @ dv
    q_new = geo.quat_multiply(pose.q, dq)
    return geo.Pose(q_new, p_new), v_new


def imu_residual(pre: PreintegratedImu, nav_k, nav_k1, gravity: np.ndarray) -> np.ndarray:
    """Unwhitened 15-vector [r_p, r_theta, r_v, r_ba, r_bg].

    nav_k and nav_k1 are (Pose, SpeedBias) pairs; zero when the states
    exactly satisfy the integrated motion.
    """
    r, _ = _residual_impl(pre, nav_k, nav_k1, gravity, want_jacobians=False)
    return r


def imu_residual_jacobians(pre: PreintegratedImu, nav_k, nav_k1, gravity: np.ndarray):
    """Residual plus Jacobians w.r.t. (pose_k, sb_k, pose_k1, sb_k1).

    Pose tangents are [dp, dtheta] (left rotation update); speed-bias
    tangents are [dv, dba, dbg].
    """
    return _residual_impl(pre, nav_k, nav_k1, gravity, want_jacobians=True)


def _residual_impl(pre: PreintegratedImu, nav_k, nav_k1, gravity, want_jacobians):
    pose_k, sb_k = nav_k
    pose_k1, sb_k1 = nav_k1
    T = pre.duration
    g = np.asarray(gravity, dtype=float)

    dba, dbg = bias_delta(pre, sb_k)
    dp_hat, dv_hat, dq_hat = _corrected_deltas(pre, dba, dbg)
    # remove the gravity baked into the stored deltas
    dp_hat = dp_hat - 0.5 * pre.gravity * T * T
    dv_hat = dv_hat - pre.gravity * T

    Rk = pose_k.rotation_matrix
    RkT = Rk.T
    u = pose_k1.t - pose_k.t - sb_k.velocity * T - 0.5 * g * T * T
    w = sb_k1.velocity - sb_k.velocity - g * T

    q_rel = geo.quat_multiply(geo.quat_conjugate(pose_k.q), pose_k1.q)
    m = geo.quat_multiply(geo.quat_conjugate(dq_hat), q_rel)
    r_theta = geo.quat_log(m)

    r = np.concatenate([RkT @ u - dp_hat, r_theta, RkT @ w - dv_hat,
                        sb_k1.bias_accel - sb_k.bias_accel,
                        sb_k1.bias_gyro - sb_k.bias_gyro])
    if not want_jacobians:
        return r, None

    Jr_inv = geo.so3_right_jacobian_inverse(r_theta)
    Rk1T = pose_k1.rotation_matrix.T

    J_pose_k = np.zeros((15, 6))
    J_sb_k = np.zeros((15, 9))
    J_pose_k1 = np.zeros((15, 6))
    J_sb_k1 = np.zeros((15, 9))

    J_pose_k[0:3, 0:3] = -RkT
    J_pose_k[0:3, 3:6] = RkT @ geo.skew(u)
    J_pose_k1[0:3, 0:3] = RkT
    J_sb_k[0:3, 0:3] = -RkT * T
    J_sb_k[0:3, 3:6] = -pre.dp_dba
    J_sb_k[0:3, 6:9] = -pre.dp_dbg

    J_pose_k[3:6, 3:6] = -Jr_inv @ Rk1T
    J_pose_k1[3:6, 3:6] = Jr_inv @ Rk1T
    # exact chain through the first-order bias-corrected delta rotation
    c = -(pre.dq_dbg @ dbg)
    Rn = geo.quat_to_matrix(geo.quat_multiply(geo.quat_conjugate(pre.delta_q), q_rel))
    J_sb_k[3:6, 6:9] = -Jr_inv @ Rn.T @ geo.so3_right_jacobian(c) @ pre.dq_dbg

    J_pose_k[6:9, 3:6] = RkT @ geo.skew(w)
    J_sb_k[6:9, 0:3] = -RkT
    J_sb_k1[6:9, 0:3] = RkT
    J_sb_k[6:9, 3:6] = -pre.dv_dba
    J_sb_k[6:9, 6:9] = -pre.dv_dbg

    J_sb_k[9:12, 3:6] = -np.eye(3)
    J_sb_k1[9:12, 3:6] = np.eye(3)
    J_sb_k[12:15, 6:9] = -np.eye(3)
    J_sb_k1[12:15, 6:9] = np.eye(3)

    return r, (J_pose_k, J_sb_k, J_pose_k1, J_sb_k1)
