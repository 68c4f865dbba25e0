"""Deterministic synthetic world: trajectories, landmarks, IMU, observations.

Every random draw comes from a counter-based generator keyed by
(seed, purpose, entity id), so datasets are bit-reproducible regardless of
evaluation order.

Time-offset model: keyframe k carries the camera-side stamp k / rate while
its image content samples the trajectory at stamp - t_d. IMU samples are
stamped on the true (IMU) clock. Shifting an observation forward along its
feature velocity by the true t_d therefore reproduces the view at the
stamp instant, which is where the estimator places its navigation states.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .errors import InvalidSpec
from .imu import GRAVITY_W, ImuNoiseConfig, ImuSample

FOV_HALF_ANGLE_COS = np.cos(np.deg2rad(45.0))
VISIBLE_DEPTH_RANGE = (0.3, 8.0)


@dataclass
class TrajectorySpec:
    kind: str = "spiral"            # spiral | sine | random_smooth
    duration: float = 30.0
    keyframe_rate: float = 10.0
    imu_rate: float = 200.0
    radius: float = 1.6             # spiral
    climb_rate: float = 0.03        # spiral, m/s
    angular_rate: float = 0.2       # spiral, rad/s
    forward_speed: float = 0.3      # sine / random_smooth
    amplitude: float = 0.8          # sine / random_smooth lateral amplitude
    frequency: float = 0.25         # sine, rad/s
    seed: int = 0                   # random_smooth coefficients

    def validate(self):
        if self.kind not in ("spiral", "sine", "random_smooth"):
            raise InvalidSpec(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0:
            raise InvalidSpec("duration must be positive")
        if self.imu_rate < 10 * self.keyframe_rate:
            raise InvalidSpec("imu_rate must be at least 10x keyframe_rate")
        if self.kind == "spiral" and (self.radius <= 0 or self.angular_rate == 0):
            raise InvalidSpec("spiral needs positive radius and nonzero angular_rate")


@dataclass
class SceneSpec:
    landmark_count: int = 300
    box_min: tuple = (-5.0, -5.0, -2.0)
    box_max: tuple = (5.0, 5.0, 2.0)
    max_observations_per_frame: int = 60
    seed: int = 0

    def validate(self):
        if self.landmark_count < 1:
            raise InvalidSpec("landmark_count must be positive")
        if any(lo >= hi for lo, hi in zip(self.box_min, self.box_max)):
            raise InvalidSpec("scene box is empty")


@dataclass
class NoiseSpec:
    pixel_sigma: float = 1.5 / 460.0
    inv_depth_sigma: float = 0.01
    hole_probability: float = 0.05
    gyro_noise: float = 1e-4
    accel_noise: float = 1e-3
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    time_offset: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.pixel_sigma, self.inv_depth_sigma, self.hole_probability,
               self.gyro_noise, self.accel_noise, self.gyro_bias_walk,
               self.accel_bias_walk) < 0:
            raise InvalidSpec("noise magnitudes must be non-negative")
        if not 0.0 <= self.hole_probability <= 1.0:
            raise InvalidSpec("hole_probability must be in [0, 1]")

    @classmethod
    def noise_free(cls, time_offset: float = 0.0, hole_probability: float = 0.0,
                   seed: int = 0) -> "NoiseSpec":
        return cls(pixel_sigma=0.0, inv_depth_sigma=0.0,
                   hole_probability=hole_probability, gyro_noise=0.0,
                   accel_noise=0.0, gyro_bias_walk=0.0, accel_bias_walk=0.0,
                   time_offset=time_offset, seed=seed)


def rng_for(seed: int, purpose: str, entity: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose, entity)."""
    key = np.random.SeedSequence([seed, zlib.crc32(purpose.encode()), entity])
    return np.random.Generator(np.random.Philox(key))


def look_rotation(forward: np.ndarray) -> np.ndarray:
    """World-from-camera rotation with the optical axis along `forward`.

    Camera convention: z forward, x right, y down; `forward` must not be
    parallel to the world vertical.
    """
    z = forward / np.linalg.norm(forward)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise InvalidSpec("trajectory heading degenerate (vertical velocity)")
    x /= nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


@dataclass
class Trajectory:
    """Analytic C2-smooth motion with closed-form derivatives."""

    spec: TrajectorySpec
    position: object
    velocity: object
    acceleration: object
    yaw: object            # heading angle of the base rotation
    yaw_rate: object
    base_rotation: np.ndarray

    def pose(self, t: float) -> geo.Pose:
        R = geo.quat_to_matrix(geo.quat_exp(np.array([0.0, 0.0, self.yaw(t)]))) @ self.base_rotation
        return geo.Pose(geo.matrix_to_quat(R), self.position(t))

    def angular_velocity_body(self, t: float) -> np.ndarray:
        # R(t) = Rz(yaw) R_base: omega_world = [0, 0, yaw_rate]
        R = self.pose(t).rotation_matrix
        return R.T @ np.array([0.0, 0.0, self.yaw_rate(t)])


def generate_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Closed-form trajectory; orientation follows the velocity direction."""
    spec.validate()
    if spec.kind == "spiral":
        r, w, c = spec.radius, spec.angular_rate, spec.climb_rate

        def position(t):
            return np.array([r * np.cos(w * t), r * np.sin(w * t), c * t])

        def velocity(t):
            return np.array([-r * w * np.sin(w * t), r * w * np.cos(w * t), c])

        def acceleration(t):
            return np.array([-r * w * w * np.cos(w * t), -r * w * w * np.sin(w * t), 0.0])

        # the velocity direction rotates rigidly with the circle
        base = look_rotation(np.array([0.0, r * w, c]) / np.hypot(r * w, c))

        def yaw(t):
            return w * t

        def yaw_rate(t):
            return w

        return Trajectory(spec, position, velocity, acceleration, yaw, yaw_rate, base)

    if spec.kind == "sine":
        s, A, W = spec.forward_speed, spec.amplitude, spec.frequency
        x0 = -0.5 * s * spec.duration

        def position(t):
            return np.array([x0 + s * t, A * np.sin(W * t), 0.0])

        def velocity(t):
            return np.array([s, A * W * np.cos(W * t), 0.0])

        def acceleration(t):
            return np.array([0.0, -A * W * W * np.sin(W * t), 0.0])

        def yaw(t):
            return np.arctan2(A * W * np.cos(W * t), s)

        def yaw_rate(t):
            vy = A * W * np.cos(W * t)
            ay = -A * W * W * np.sin(W * t)
            return ay * s / (s * s + vy * vy)

        base = look_rotation(np.array([1.0, 0.0, 0.0]))
        return Trajectory(spec, position, velocity, acceleration, yaw, yaw_rate, base)

    # random_smooth: seeded sinusoid mixture drifting forward
    rng = rng_for(spec.seed, "trajectory")
    n_h = 3
    amps = rng.uniform(-1.0, 1.0, (n_h, 3)) * spec.amplitude / n_h
    # keep the forward velocity component dominant so the heading is defined
    amps[:, 0] *= 0.3
    freqs = rng.uniform(0.15, 0.5, (n_h, 3))
    phases = rng.uniform(0, 2 * np.pi, (n_h, 3))
    amps[:, 2] *= 0.3
    s = spec.forward_speed
    x0 = -0.5 * s * spec.duration

    def position(t):
        p = np.array([x0 + s * t, 0.0, 0.0])
        for k in range(n_h):
            p = p + amps[k] * np.sin(freqs[k] * t + phases[k])
        return p

    def velocity(t):
        v = np.array([s, 0.0, 0.0])
        for k in range(n_h):
            v = v + amps[k] * freqs[k] * np.cos(freqs[k] * t + phases[k])
        return v

    def acceleration(t):
        a = np.zeros(3)
        for k in range(n_h):
            a = a - amps[k] * freqs[k] ** 2 * np.sin(freqs[k] * t + phases[k])
        return a

    def yaw(t):
        v = velocity(t)
        return np.arctan2(v[1], v[0])

    def yaw_rate(t):
        v = velocity(t)
        a = acceleration(t)
        return (a[1] * v[0] - a[0] * v[1]) / (v[0] ** 2 + v[1] ** 2)

    base = look_rotation(np.array([1.0, 0.0, 0.0]))
    return Trajectory(spec, position, velocity, acceleration, yaw, yaw_rate, base)


def synthesize_imu(traj: Trajectory, noise: NoiseSpec) -> list[ImuSample]:
    """Ideal body-frame gyro/accel stream plus white noise and bias walks."""
    spec = traj.spec
    dt = 1.0 / spec.imu_rate
    n = int(round(spec.duration * spec.imu_rate))
    rng = rng_for(noise.seed, "imu_stream")
    bias_g = np.zeros(3)
    bias_a = np.zeros(3)
    sqrt_rate = np.sqrt(spec.imu_rate)
    samples = []
    for j in range(n + 1):
        t = j / spec.imu_rate
        R = traj.pose(t).rotation_matrix
        gyro = traj.angular_velocity_body(t)
        accel = R.T @ (traj.acceleration(t) - GRAVITY_W)
        if noise.gyro_noise or noise.accel_noise or noise.gyro_bias_walk or noise.accel_bias_walk:
            gyro = gyro + bias_g + rng.normal(0.0, 1.0, 3) * noise.gyro_noise * sqrt_rate
            accel = accel + bias_a + rng.normal(0.0, 1.0, 3) * noise.accel_noise * sqrt_rate
            bias_g = bias_g + rng.normal(0.0, 1.0, 3) * noise.gyro_bias_walk * np.sqrt(dt)
            bias_a = bias_a + rng.normal(0.0, 1.0, 3) * noise.accel_bias_walk * np.sqrt(dt)
        samples.append(ImuSample(t, gyro, accel))
    return samples


def sample_landmarks(scene: SceneSpec) -> np.ndarray:
    scene.validate()
    lo = np.asarray(scene.box_min, dtype=float)
    hi = np.asarray(scene.box_max, dtype=float)
    points = np.empty((scene.landmark_count, 3))
    for l in range(scene.landmark_count):
        points[l] = rng_for(scene.seed, "landmark", l).uniform(lo, hi)
    return points


@dataclass(frozen=True)
class ObservationRecord:
    kf_index: int
    timestamp: float
    landmark_id: int
    u: float
    v: float
    depth: float | None


@dataclass
class Dataset:
    """Everything one estimator run consumes, plus ground truth."""

    ground_truth: list          # (timestamp, Pose) per keyframe
    imu: list                   # ImuSample stream
    observations: list          # ObservationRecord rows, (kf, landmark) sorted
    landmarks: np.ndarray
    trajectory_spec: TrajectorySpec
    scene_spec: SceneSpec
    noise_spec: NoiseSpec

    def keyframe_count(self) -> int:
        return len(self.ground_truth)

    def observations_by_keyframe(self) -> dict[int, list[ObservationRecord]]:
        grouped: dict[int, list[ObservationRecord]] = {}
        for rec in self.observations:
            grouped.setdefault(rec.kf_index, []).append(rec)
        return grouped

    def hole_fraction(self) -> float:
        if not self.observations:
            return 0.0
        holes = sum(1 for rec in self.observations if rec.depth is None)
        return holes / len(self.observations)


def _visible_projection(cam_from_world: geo.Pose, point: np.ndarray):
    p = cam_from_world.transform_point(point)
    z = p[2]
    if not VISIBLE_DEPTH_RANGE[0] <= z <= VISIBLE_DEPTH_RANGE[1]:
        return None
    norm = np.linalg.norm(p)
    if z < FOV_HALF_ANGLE_COS * norm:
        return None
    return p[0] / z, p[1] / z, z


def synthesize_observations(traj: Trajectory, scene: SceneSpec, noise: NoiseSpec,
                            landmarks: np.ndarray,
                            extrinsics: geo.Extrinsics | None = None) -> list[ObservationRecord]:
    """Per-keyframe landmark sightings with pixel and inverse-depth noise.

    The stamp of keyframe k is k / keyframe_rate; the imaged content is the
    trajectory at stamp - time_offset. Measured depth carries Gaussian
    noise in the inverse-depth domain; holes drop the depth entirely.
    """
    spec = traj.spec
    ext = extrinsics or geo.Extrinsics.identity()
    n_kf = int(round(spec.duration * spec.keyframe_rate))
    n_lm = landmarks.shape[0]
    records = []
    for k in range(n_kf):
        stamp = k / spec.keyframe_rate
        content_time = stamp - noise.time_offset
        cam = geo.camera_pose(traj.pose(content_time), ext).inverse()
        visible = []
        for l in range(n_lm):
            proj = _visible_projection(cam, landmarks[l])
            if proj is not None:
                u, v, z = proj
                visible.append((u * u + v * v, l, u, v, z))
        visible.sort(key=lambda item: (item[0], item[1]))
        for _, l, u, v, z in visible[:scene.max_observations_per_frame]:
            rng = rng_for(noise.seed, "observation", k * n_lm + l)
            noise_draw = rng.normal(0.0, 1.0, 3)
            hole_draw = rng.uniform()
            if noise.pixel_sigma:
                u += noise_draw[0] * noise.pixel_sigma
                v += noise_draw[1] * noise.pixel_sigma
            if hole_draw < noise.hole_probability:
                depth = None
            else:
                inv_depth = 1.0 / z + noise_draw[2] * noise.inv_depth_sigma
                depth = 1.0 / max(inv_depth, 1e-2)
            records.append(ObservationRecord(k, stamp, l, u, v, depth))
    return records


def _covisibility_ok(records: list[ObservationRecord], n_kf: int, n_lm: int) -> bool:
    by_kf: dict[int, set] = {}
    seen_count = np.zeros(n_lm, dtype=int)
    for rec in records:
        by_kf.setdefault(rec.kf_index, set()).add(rec.landmark_id)
        seen_count[rec.landmark_id] += 1
    if (seen_count >= 2).sum() < 0.5 * n_lm:
        return False
    for k in range(n_kf - 1):
        a = by_kf.get(k, set())
        b = by_kf.get(k + 1, set())
        if len(a & b) < 20:
            return False
    return True


def generate_dataset(traj_spec: TrajectorySpec, scene_spec: SceneSpec,
                     noise_spec: NoiseSpec, max_attempts: int = 20) -> Dataset:
    """Full deterministic dataset; rescenes until the co-visibility floor holds."""
    traj_spec.validate()
    scene_spec.validate()
    noise_spec.validate()
    traj = generate_trajectory(traj_spec)
    n_kf = int(round(traj_spec.duration * traj_spec.keyframe_rate))

    scene = scene_spec
    for attempt in range(max_attempts):
        landmarks = sample_landmarks(scene)
        records = synthesize_observations(traj, scene, noise_spec, landmarks)
        if _covisibility_ok(records, n_kf, scene.landmark_count):
            break
        scene = SceneSpec(scene_spec.landmark_count, scene_spec.box_min,
                          scene_spec.box_max, scene_spec.max_observations_per_frame,
                          seed=scene_spec.seed + 1000 * (attempt + 1))
    else:
        raise InvalidSpec("could not satisfy the co-visibility floor; "
                          "trajectory and scene are incompatible")

    imu_stream = synthesize_imu(traj, noise_spec)
    ground_truth = [(k / traj_spec.keyframe_rate, traj.pose(k / traj_spec.keyframe_rate))
                    for k in range(n_kf)]
    return Dataset(ground_truth, imu_stream, records, landmarks,
                   traj_spec, scene, noise_spec)


def specs_as_dict(dataset: Dataset) -> dict:
    return {
        "trajectory": asdict(dataset.trajectory_spec),
        "scene": asdict(dataset.scene_spec),
        "noise": asdict(dataset.noise_spec),
    }


def imu_noise_config(noise: NoiseSpec) -> ImuNoiseConfig:
    return ImuNoiseConfig(gyro_noise=noise.gyro_noise, accel_noise=noise.accel_noise,
                          gyro_bias_walk=noise.gyro_bias_walk,
                          accel_bias_walk=noise.accel_bias_walk)
