"""Sliding-window depth-aided visual-inertial estimator.

Maintains navigation states, landmark states (1D inverse depth or 3D
anchor-frame states), IMU preintegrations, an optional time offset, and a
marginalization prior; assembles the nonlinear least-squares problem,
optimizes it, and marginalizes the oldest keyframe to keep the window
bounded.

Non-anchor vision residuals dominate the factor count, so they are
evaluated in one vectorized batch per evaluation point (through the
problem's prepare hook); each factor then just slices its rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from . import imu as imu_mod
from . import marginalization as marg
from . import simulate as sim
from . import solver as nlls
from . import vision
from .errors import (DvioError, InsufficientParallax, ModeMismatch,
                     NoObservations, NonMonotonicTimestamps,
                     PointBehindCamera, ShiftedDepthInvalid,
                     UninitializedFeature)

MODES = ("dvio_1d", "dvio_3d", "vio_no_depth")

# landmarks pushed (numerically) to or beyond infinity are dropped
MIN_INV_DEPTH = 1e-3


@dataclass
class NavState:
    pose: geo.Pose
    speed_bias: imu_mod.SpeedBias
    timestamp: float
    frame_id: int


@dataclass
class EstimatorConfig:
    mode: str = "dvio_1d"
    window_size: int = 10
    estimate_time_offset: bool = False
    weights: vision.ResidualWeights = field(default_factory=vision.ResidualWeights)
    imu_noise: imu_mod.ImuNoiseConfig = field(default_factory=imu_mod.ImuNoiseConfig)
    # warm-started tracking converges in a few steps; the relative function
    # tolerance stops the grind against the fixed-Jacobian prior
    solver_options: nlls.SolverOptions = field(default_factory=lambda: nlls.SolverOptions(
        max_iterations=6, function_tolerance=1e-6))
    marginalization_mode: str = "fast"  # fast | dense_oracle
    gauge_prior_weight: float = 1e8
    time_offset_bound: float = 0.1
    time_offset_in_prior: bool = True
    bootstrap_position_sigma: float = 0.01
    bootstrap_yaw_sigma: float = np.deg2rad(0.5)
    bootstrap_velocity_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ModeMismatch(f"unknown estimator mode {self.mode!r}")
        if self.window_size < 3:
            raise ValueError("window_size must be at least 3")
        if self.marginalization_mode not in ("fast", "dense_oracle"):
            raise ValueError(f"unknown marginalization mode {self.marginalization_mode!r}")

    @property
    def uses_depth(self) -> bool:
        return self.mode in ("dvio_1d", "dvio_3d")

    @property
    def landmark_mode(self) -> str:
        return "3d" if self.mode == "dvio_3d" else "1d"


def pose_block(frame_id):
    return ("p", frame_id)


def sb_block(frame_id):
    return ("sb", frame_id)


def lm_block(lm_id):
    return ("lm", lm_id)


TD_BLOCK = ("td",)


# ------------------------------------------------------------------ factors

class ImuFactor:
    loss = "none"
    loss_scale = 1.0

    def __init__(self, pre: imu_mod.PreintegratedImu, fid_i, fid_j, gravity):
        self.pre = pre
        self.block_ids = (pose_block(fid_i), sb_block(fid_i),
                          pose_block(fid_j), sb_block(fid_j))
        self.gravity = gravity

    def _navs(self, values):
        p_i, s_i, p_j, s_j = (values[b].value for b in self.block_ids)
        return ((p_i, imu_mod.SpeedBias.from_vector(s_i)),
                (p_j, imu_mod.SpeedBias.from_vector(s_j)))

    def evaluate(self, values, ctx, with_jacobians):
        nav_i, nav_j = self._navs(values)
        W = self.pre.sqrt_information()
        if not with_jacobians:
            r = imu_mod.imu_residual(self.pre, nav_i, nav_j, self.gravity)
            return W @ r, None
        r, (Jpi, Jsi, Jpj, Jsj) = imu_mod.imu_residual_jacobians(
            self.pre, nav_i, nav_j, self.gravity)
        return W @ r, (W @ Jpi, W @ Jsi, W @ Jpj, W @ Jsj)


class AnchorVisionFactor:
    """Anchor-keyframe residual: inverse depth (1D) or full state (3D).

    The measured observation is shifted along its feature velocity when the
    time offset is estimated.
    """

    loss = "cauchy"

    def __init__(self, mode, lm_id, meas_uv, meas_depth,
                 weights: vision.ResidualWeights, meas_velocity=None,
                 estimate_td=False, fixed_td=0.0):
        self.mode = mode
        self.meas_uv = np.asarray(meas_uv, dtype=float)
        self.meas_depth = meas_depth
        self.meas_velocity = meas_velocity
        self.estimate_td = estimate_td
        self.fixed_td = fixed_td
        self.loss_scale = weights.cauchy_scale
        self.whiten = weights.whitening(meas_depth is not None)
        ids = [lm_block(lm_id)]
        if estimate_td:
            ids.append(TD_BLOCK)
        self.block_ids = tuple(ids)

    def evaluate(self, values, ctx, with_jacobians):
        td = values[TD_BLOCK].value[0] if self.estimate_td else self.fixed_td
        meas_uv = self.meas_uv
        depth = self.meas_depth
        vel = self.meas_velocity
        if td != 0.0 and vel is not None:
            meas_uv = meas_uv + td * vel[:2]
            if depth is not None:
                depth = depth + td * vel[2]
                if depth <= vision.MIN_DEPTH:
                    raise ShiftedDepthInvalid("anchor depth shifted out of range")
        td_vel = vel if self.estimate_td else None
        lm = values[self.block_ids[0]].value
        w = self.whiten
        if self.mode == "1d":
            r, J_lm, J_td = vision.anchor_residual_jacobians_1d(lm[0], depth, td_vel)
            r = r * w[2:]
            if not with_jacobians:
                return r, None
            jac = [J_lm * w[2:, None]]
            if self.estimate_td:
                jac.append(J_td * w[2:, None] if J_td is not None else np.zeros((1, 1)))
            return r, tuple(jac)
        r, J_lm, J_td = vision.anchor_residual_jacobians_3d(lm, meas_uv, depth, td_vel)
        r = r * w
        if not with_jacobians:
            return r, None
        jac = [J_lm * w[:, None]]
        if self.estimate_td:
            jac.append(J_td * w[:, None] if J_td is not None
                       else np.zeros((len(r), 1)))
        return r, tuple(jac)


class VisionBatch:
    """All non-anchor vision factors of one problem as a single vectorized
    group factor.

    Constant measurement arrays are gathered at problem build time; each
    evaluation point gets one residual pass (through the problem's prepare
    hook) and, for linearization, one Jacobian pass folded into the normal
    equations with a bincount scatter. Residual rows of depth holes are
    zeroed so they drop out of both cost and information.
    """

    loss = "cauchy"

    def __init__(self, mode: str, extrinsics: geo.Extrinsics,
                 weights: vision.ResidualWeights, estimate_td: bool,
                 fixed_td: float = 0.0):
        self.mode = mode
        self.extrinsics = extrinsics
        self.estimate_td = estimate_td
        self.fixed_td = fixed_td
        self.whiten3 = np.array([1.0 / weights.sigma_uv, 1.0 / weights.sigma_uv,
                                 1.0 / weights.sigma_inv_depth])
        self.loss_scale = weights.cauchy_scale
        self.pair_index: dict = {}
        self.pair_fids: list = []
        self.rows: list = []
        self.count = 0
        self._cols_cache = None

    def add_row(self, lm_id, anchor_fid, obs_fid, anchor_uv, obs, anchor_vel,
                meas_vel):
        pair = (anchor_fid, obs_fid)
        p_idx = self.pair_index.setdefault(pair, len(self.pair_fids))
        if p_idx == len(self.pair_fids):
            self.pair_fids.append(pair)
        self.rows.append((p_idx, lm_id, anchor_uv, obs, anchor_vel, meas_vel,
                          anchor_fid, obs_fid))

    def finalize(self):
        F = len(self.rows)
        self.count = F
        self.f_pair = np.array([r[0] for r in self.rows], dtype=int)
        self.lm_ids = [r[1] for r in self.rows]
        self.anchor_uv = np.array([r[2] for r in self.rows], dtype=float).reshape(F, 2)
        self.meas_uv = np.array([[r[3].u, r[3].v] for r in self.rows]).reshape(F, 2)
        self.meas_depth = np.array([np.nan if r[3].depth is None else r[3].depth
                                    for r in self.rows])
        self.has_depth = ~np.isnan(self.meas_depth)
        zeros = np.zeros(3)
        self.anchor_vel = np.array([zeros if r[4] is None else r[4]
                                    for r in self.rows]).reshape(F, 3)
        self.meas_vel = np.array([zeros if r[5] is None else r[5]
                                  for r in self.rows]).reshape(F, 3)
        self.lm_keys = [lm_block(lm_id) for lm_id in self.lm_ids]
        self.row_blocks = [(pose_block(r[6]), pose_block(r[7]), lm_block(r[1]))
                           + ((TD_BLOCK,) if self.estimate_td else ())
                           for r in self.rows]

    def touched_blocks(self):
        out = set()
        for ids in self.row_blocks:
            out.update(ids)
        return out

    def prepare(self, values):
        """Residual pass for one evaluation point."""
        if self.count == 0:
            return {"batch": self}
        ext = self.extrinsics
        P = len(self.pair_fids)
        R_ci = np.empty((P, 3, 3))
        t_ci = np.empty((P, 3))
        R_cjT = np.empty((P, 3, 3))
        t_cj = np.empty((P, 3))
        t_bi = np.empty((P, 3))
        t_bj = np.empty((P, 3))
        R_bc = ext.body_from_camera.rotation_matrix
        t_bc = ext.body_from_camera.t
        for p, (fi, fj) in enumerate(self.pair_fids):
            pose_i = values[pose_block(fi)].value
            pose_j = values[pose_block(fj)].value
            Ri = pose_i.rotation_matrix
            Rj = pose_j.rotation_matrix
            R_ci[p] = Ri @ R_bc
            t_ci[p] = Ri @ t_bc + pose_i.t
            R_cjT[p] = (Rj @ R_bc).T
            t_cj[p] = Rj @ t_bc + pose_j.t
            t_bi[p] = pose_i.t
            t_bj[p] = pose_j.t
        R_ji = R_cjT @ R_ci
        t_ji = np.einsum("pij,pj->pi", R_cjT, t_ci - t_cj)

        td = float(values[TD_BLOCK].value[0]) if self.estimate_td else self.fixed_td
        if self.mode == "1d":
            lam = np.array([values[k].value[0] for k in self.lm_keys])
            a_uv = self.anchor_uv
            if td != 0.0:
                a_uv = a_uv + td * self.anchor_vel[:, :2]
        else:
            states = np.array([values[k].value for k in self.lm_keys])
            a_uv = states[:, 0:2]
            lam = states[:, 2]
        m_uv = self.meas_uv
        m_depth = self.meas_depth
        if td != 0.0:
            m_uv = m_uv + td * self.meas_vel[:, :2]
            m_depth = m_depth + td * self.meas_vel[:, 2]
        bad_depth = self.has_depth & (m_depth <= vision.MIN_DEPTH)

        lam_safe = np.where(np.abs(lam) < 1e-12, 1e-12, lam)
        p_anchor = np.empty((self.count, 3))
        p_anchor[:, 0] = a_uv[:, 0] / lam_safe
        p_anchor[:, 1] = a_uv[:, 1] / lam_safe
        p_anchor[:, 2] = 1.0 / lam_safe

        Rji_f = R_ji[self.f_pair]
        p_j = np.einsum("fij,fj->fi", Rji_f, p_anchor) + t_ji[self.f_pair]
        z = p_j[:, 2]
        bad_point = z <= vision.MIN_DEPTH
        z_safe = np.where(bad_point, 1.0, z)
        iz = 1.0 / z_safe

        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.empty((self.count, 3))
            r[:, 0] = (p_j[:, 0] * iz - m_uv[:, 0]) * self.whiten3[0]
            r[:, 1] = (p_j[:, 1] * iz - m_uv[:, 1]) * self.whiten3[1]
            depth_term = np.where(self.has_depth & ~bad_depth,
                                  iz - 1.0 / np.where(self.has_depth, m_depth, 1.0),
                                  0.0)
            r[:, 2] = depth_term * self.whiten3[2]
        return {
            "batch": self, "r": r, "bad_point": bad_point, "bad_depth": bad_depth,
            "_p_anchor": p_anchor, "_p_j": p_j, "_iz": iz, "_lam": lam_safe,
            "_m_depth": m_depth, "_R_ci": R_ci, "_t_ci": t_ci, "_R_cjT": R_cjT,
            "_t_bi": t_bi, "_t_bj": t_bj, "_R_ji": R_ji,
        }

    def _costs(self, data):
        r = data["r"]
        s = np.einsum("fi,fi->f", r, r)
        c2 = self.loss_scale * self.loss_scale
        costs = c2 * np.log1p(s / c2)
        weights = 1.0 / (1.0 + s / c2)
        return costs, weights

    def cost_only(self, values, ctx):
        """Per-row robust costs; infeasible rows poison the total with inf."""
        if self.count == 0:
            return np.zeros(0)
        costs, _ = self._costs(ctx)
        bad = ctx["bad_point"] | ctx["bad_depth"]
        if bad.any():
            costs = np.where(bad, np.inf, costs)
        return costs

    def accumulate(self, values, ctx, H, g, block_cols):
        """Vectorized fold of every row into the normal equations."""
        if self.count == 0:
            return np.zeros(0)
        if ctx["bad_point"].any():
            raise PointBehindCamera("landmark behind the observing camera")
        if ctx["bad_depth"].any():
            raise ShiftedDepthInvalid("shifted depth out of range")
        J = self._jacobians(ctx)
        r = ctx["r"]
        costs, w = self._costs(ctx)

        cols = self._column_indices(block_cols)
        dim = H.shape[0]
        JtJ = np.einsum("fri,frj->fij", J, J) * w[:, None, None]
        Jtr = np.einsum("fri,fr->fi", J, r) * w[:, None]
        idx2 = (cols[:, :, None] * dim + cols[:, None, :]).ravel()
        H += np.bincount(idx2, weights=JtJ.ravel(), minlength=dim * dim) \
            .reshape(dim, dim)
        g += np.bincount(cols.ravel(), weights=Jtr.ravel(), minlength=dim)
        return costs

    def _column_indices(self, block_cols):
        if self._cols_cache is not None and self._cols_cache[0] is block_cols:
            return self._cols_cache[1]
        cols = np.array([np.concatenate([block_cols[bid] for bid in ids])
                         for ids in self.row_blocks], dtype=int)
        self._cols_cache = (block_cols, cols)
        return cols

    def _jacobians(self, data):
        """Whitened stacked Jacobian (F, 3, C); hole rows zeroed."""
        F = self.count
        pair = self.f_pair
        p_j = data["_p_j"]
        iz = data["_iz"]
        iz2 = iz * iz
        K = np.zeros((F, 3, 3))
        K[:, 0, 0] = iz
        K[:, 0, 2] = -p_j[:, 0] * iz2
        K[:, 1, 1] = iz
        K[:, 1, 2] = -p_j[:, 1] * iz2
        K[:, 2, 2] = np.where(self.has_depth, -iz2, 0.0)
        K *= self.whiten3[None, :, None]

        M = K @ data["_R_cjT"][pair]
        p_anchor = data["_p_anchor"]
        p_world = np.einsum("fij,fj->fi", data["_R_ci"][pair], p_anchor) \
            + data["_t_ci"][pair]

        def batched_skew(v):
            S = np.zeros((F, 3, 3))
            S[:, 0, 1] = -v[:, 2]
            S[:, 0, 2] = v[:, 1]
            S[:, 1, 0] = v[:, 2]
            S[:, 1, 2] = -v[:, 0]
            S[:, 2, 0] = -v[:, 1]
            S[:, 2, 1] = v[:, 0]
            return S

        lm_dim = 1 if self.mode == "1d" else 3
        C = 12 + lm_dim + (1 if self.estimate_td else 0)
        J = np.empty((F, 3, C))
        J[:, :, 0:3] = M
        J[:, :, 3:6] = -(M @ batched_skew(p_world - data["_t_bi"][pair]))
        J[:, :, 6:9] = -M
        J[:, :, 9:12] = M @ batched_skew(p_world - data["_t_bj"][pair])

        KR = K @ data["_R_ji"][pair]
        lam = data["_lam"]
        d_depth = np.einsum("fij,fj->fi", KR, -p_anchor / lam[:, None])
        if self.mode == "1d":
            J[:, :, 12] = d_depth
        else:
            J[:, :, 12] = KR[:, :, 0] / lam[:, None]
            J[:, :, 13] = KR[:, :, 1] / lam[:, None]
            J[:, :, 14] = d_depth

        if self.estimate_td:
            J_td = -self.meas_vel.copy()
            with np.errstate(invalid="ignore"):
                m_depth = data["_m_depth"]
                J_td[:, 2] = np.where(self.has_depth,
                                      self.meas_vel[:, 2] / np.where(
                                          self.has_depth, m_depth * m_depth, 1.0),
                                      0.0)
            J_td *= self.whiten3[None, :]
            if self.mode == "1d":
                shift = np.zeros((F, 3))
                shift[:, 0:2] = self.anchor_vel[:, 0:2]
                J_td += np.einsum("fij,fj->fi", KR, shift / lam[:, None])
            J[:, :, 12 + lm_dim] = J_td
        return J


class MarginalizationPriorFactor:
    """Prior factor left by marginalization: fixed first-estimate Jacobians,
    residual updated from the current states."""

    loss = "none"
    loss_scale = 1.0

    def __init__(self, prior: marg.PriorFactor):
        self.prior = prior
        self.block_ids = tuple(sid for sid, _ in prior.layout)
        self._columns = {}
        offset = 0
        for sid, kind in prior.layout:
            size = marg.BLOCK_SIZES[kind]
            self._columns[sid] = prior.sqrt_information[:, offset:offset + size]
            offset += size

    def _delta(self, values):
        parts = []
        for sid, kind in self.prior.layout:
            lin = self.prior.linearization_point[sid]
            current = values[sid].value
            if kind == "pose":
                parts.append(current.local_delta(lin))
            else:
                parts.append(np.atleast_1d(current - lin))
        return np.concatenate(parts)

    def evaluate(self, values, ctx, with_jacobians):
        r = self.prior.residual_offset + self.prior.sqrt_information @ self._delta(values)
        if not with_jacobians:
            return r, None
        return r, tuple(self._columns[sid] for sid in self.block_ids)


# -------------------------------------------------------------- the window

@dataclass
class RunReport:
    solve_reports: list = field(default_factory=list)
    time_offset_trace: list = field(default_factory=list)
    diverged: bool = False
    failed_at: int | None = None
    error: str | None = None


class SlidingWindow:
    """Estimator state: navigation states, landmarks, preintegrations, prior."""

    def __init__(self, config: EstimatorConfig,
                 extrinsics: geo.Extrinsics | None = None):
        config.validate()
        self.config = config
        self.extrinsics = extrinsics or geo.Extrinsics.identity()
        self.nav_states: list[NavState] = []
        self.preintegrations: list[imu_mod.PreintegratedImu] = []
        self.imu_segments: list[list] = []  # raw samples for re-integration
        self.landmarks: dict[int, object] = {}
        self.prior: MarginalizationPriorFactor | None = None
        self.time_offset: float = 0.0
        self.td_active: bool = False
        self.history: list[tuple[float, geo.Pose]] = []
        self.gauge_target: geo.Pose | None = None

    # ------------------------------------------------------------- frames

    def add_keyframe(self, nav_guess: NavState, preintegration, observations,
                     imu_segment=None):
        """Append one keyframe with its landmark observations.

        observations: mapping landmark_id -> Observation. New landmark ids
        are anchored at this keyframe. The window may exceed the configured
        size until marginalize_and_slide runs.
        """
        if self.nav_states:
            if nav_guess.timestamp <= self.nav_states[-1].timestamp:
                raise NonMonotonicTimestamps("keyframe timestamps must increase")
            if preintegration is None:
                raise ValueError("preintegration required after the first keyframe")
        if self.gauge_target is None:
            self.gauge_target = nav_guess.pose
        self.nav_states.append(nav_guess)
        if preintegration is not None:
            self.preintegrations.append(preintegration)
            self.imu_segments.append(imu_segment)

        fid = nav_guess.frame_id
        for lm_id, obs in observations.items():
            if not self.config.uses_depth and obs.depth is not None:
                obs = replace(obs, depth=None)
            lm = self.landmarks.get(lm_id)
            if lm is None:
                if self.config.landmark_mode == "1d":
                    lm = vision.Landmark1D(anchor_index=fid)
                else:
                    lm = vision.Landmark3D(anchor_index=fid)
                self.landmarks[lm_id] = lm
            lm.observations[fid] = obs

    def frame_ids(self):
        return [n.frame_id for n in self.nav_states]

    def nav_by_frame(self, fid) -> NavState:
        for n in self.nav_states:
            if n.frame_id == fid:
                return n
        raise KeyError(fid)

    def camera_pose_of(self, fid) -> geo.Pose:
        return geo.camera_pose(self.nav_by_frame(fid).pose, self.extrinsics)

    # ------------------------------------------------------ initialization

    def initialize_feature(self, lm_id):
        """Two-step feature initialization.

        First transform every depth-bearing observation into the anchor
        camera using the current window poses and average the depths;
        landmarks with no depth anywhere fall back to linear triangulation
        from the 2D observations. The 3D anchor coordinates come from the
        anchor measurement (depth path) or the triangulated point.
        """
        lm = self.landmarks[lm_id]
        if not lm.observations:
            raise NoObservations(f"landmark {lm_id} has no observations")
        anchor_cam = self.camera_pose_of(lm.anchor_index)
        anchor_from_world = anchor_cam.inverse()
        anchor_obs = lm.anchor_observation()

        depths = []
        for fid, obs in lm.observations.items():
            if obs.depth is None:
                continue
            point_world = self.camera_pose_of(fid).transform_point(
                vision.back_projection(obs.u, obs.v, 1.0 / obs.depth))
            depth_in_anchor = anchor_from_world.transform_point(point_world)[2]
            if depth_in_anchor > vision.MIN_DEPTH:
                depths.append(depth_in_anchor)
        if depths:
            lm.inv_depth = 1.0 / float(np.mean(depths))
            if self.config.landmark_mode == "3d":
                lm.u_anchor = anchor_obs.u
                lm.v_anchor = anchor_obs.v
            return lm.inv_depth

        point_world = self._triangulate(lm)
        p_anchor = anchor_from_world.transform_point(point_world)
        lo, hi = self.TRIANGULATED_DEPTH_RANGE
        if not lo <= p_anchor[2] <= hi:
            raise InsufficientParallax(f"landmark {lm_id} triangulated at "
                                       f"implausible depth {p_anchor[2]:.3g}")
        lm.inv_depth = 1.0 / float(p_anchor[2])
        if self.config.landmark_mode == "3d":
            lm.u_anchor = float(p_anchor[0] / p_anchor[2])
            lm.v_anchor = float(p_anchor[1] / p_anchor[2])
        return lm.inv_depth

    # rays closer to parallel than this cannot be triangulated reliably
    MIN_PARALLAX_RAD = np.deg2rad(1.0)
    TRIANGULATED_DEPTH_RANGE = (0.05, 100.0)

    def _triangulate(self, lm) -> np.ndarray:
        """Linear triangulation from all 2D observations and window poses."""
        if len(lm.observations) < 2:
            raise InsufficientParallax("triangulation needs at least two observations")
        rays = []
        rows = []
        for fid, obs in lm.observations.items():
            cam = self.camera_pose_of(fid)
            d = cam.rotation_matrix @ np.array([obs.u, obs.v, 1.0])
            rays.append(d / np.linalg.norm(d))
            P = cam.inverse().matrix()[:3, :]
            rows.append(obs.u * P[2] - P[0])
            rows.append(obs.v * P[2] - P[1])
        max_angle = 0.0
        for i in range(len(rays)):
            for j in range(i + 1, len(rays)):
                dot = np.clip(rays[i] @ rays[j], -1.0, 1.0)
                max_angle = max(max_angle, float(np.arccos(dot)))
        if max_angle < self.MIN_PARALLAX_RAD:
            raise InsufficientParallax("observation rays nearly parallel")
        A = np.array(rows)
        _, s, Vt = np.linalg.svd(A)
        if s[2] <= 1e-7 * s[0]:
            raise InsufficientParallax("triangulation system rank-deficient")
        X = Vt[-1]
        if abs(X[3]) < 1e-12:
            raise InsufficientParallax("triangulated point at infinity")
        return X[:3] / X[3]

    def initialize_new_features(self) -> set:
        """Try to initialize every uninitialized landmark; returns the ids
        that still lack a state (kept out of the problem until they gain
        observations)."""
        pending = set()
        for lm_id, lm in self.landmarks.items():
            if lm.initialized:
                continue
            try:
                self.initialize_feature(lm_id)
            except (InsufficientParallax, NoObservations):
                pending.add(lm_id)
        return pending

    # ---------------------------------------------------------- velocities

    def _feature_velocity(self, lm, fid):
        """Velocity of one observation from the nearest frames in time.

        Interior observations difference their two neighbours (which kills
        the leading truncation error of a one-sided difference); the first
        and last observations fall back to forward/backward differences.
        Depth rate is zeroed across holes; lone observations get zero.
        """
        fids = sorted(lm.observations)
        pos = fids.index(fid)
        if len(fids) == 1:
            return np.zeros(3)
        lo = max(pos - 1, 0)
        hi = min(pos + 1, len(fids) - 1)
        a, b = lm.observations[fids[lo]], lm.observations[fids[hi]]
        return vision.feature_velocity_with_holes(a, b)

    # ------------------------------------------------------------- problem

    def _add_landmark_factors(self, problem: nlls.Problem, batch: VisionBatch,
                              lm_id, lm, window_fids, estimate_td, fixed_td=0.0):
        cfg = self.config
        dim = 1 if cfg.landmark_mode == "1d" else 3
        value = (np.array([lm.inv_depth]) if dim == 1 else lm.state_vector())
        problem.add_block(nlls.ParameterBlock(lm_block(lm_id), "vector", value))

        with_velocities = estimate_td or fixed_td != 0.0
        anchor_obs = lm.anchor_observation()
        anchor_vel = (self._feature_velocity(lm, lm.anchor_index)
                      if with_velocities else None)
        if cfg.uses_depth and anchor_obs.depth is not None:
            problem.add_factor(AnchorVisionFactor(
                cfg.landmark_mode, lm_id, anchor_obs.uv, anchor_obs.depth,
                cfg.weights, meas_velocity=anchor_vel,
                estimate_td=estimate_td, fixed_td=fixed_td))
        elif cfg.landmark_mode == "3d":
            problem.add_factor(AnchorVisionFactor(
                cfg.landmark_mode, lm_id, anchor_obs.uv, None, cfg.weights,
                meas_velocity=anchor_vel, estimate_td=estimate_td,
                fixed_td=fixed_td))

        for fid, obs in lm.observations.items():
            if fid == lm.anchor_index or fid not in window_fids:
                continue
            meas_vel = (self._feature_velocity(lm, fid)
                        if with_velocities else None)
            batch.add_row(lm_id, lm.anchor_index, fid, anchor_obs.uv, obs,
                          anchor_vel, meas_vel)

    def build_problem(self, skip_landmarks=frozenset()) -> nlls.Problem:
        """Assemble the sliding-window problem.

        One IMU factor per consecutive pair; anchor and non-anchor vision
        factors per landmark (Cauchy loss); the marginalization prior when
        present, else a gauge prior on the first pose; a time-offset block
        when enabled.
        """
        cfg = self.config
        estimate_td = cfg.estimate_time_offset and self.td_active
        batch = VisionBatch(cfg.landmark_mode, self.extrinsics, cfg.weights,
                            estimate_td, fixed_td=self.time_offset)
        problem = nlls.Problem(prepare=batch.prepare)
        for nav in self.nav_states:
            problem.add_block(nlls.ParameterBlock(pose_block(nav.frame_id), "pose", nav.pose))
            problem.add_block(nlls.ParameterBlock(sb_block(nav.frame_id), "vector",
                                                  nav.speed_bias.as_vector()))
        if estimate_td:
            problem.add_block(nlls.ParameterBlock(
                TD_BLOCK, "vector", np.array([self.time_offset]),
                bounds=(-cfg.time_offset_bound, cfg.time_offset_bound)))

        window_fids = set(self.frame_ids())
        for lm_id, lm in self.landmarks.items():
            if lm_id in skip_landmarks:
                continue
            if not lm.initialized:
                raise UninitializedFeature(f"landmark {lm_id} has no state")
            self._add_landmark_factors(problem, batch, lm_id, lm, window_fids,
                                       estimate_td, fixed_td=self.time_offset)

        for pre, nav_i, nav_j in zip(self.preintegrations, self.nav_states,
                                     self.nav_states[1:]):
            problem.add_factor(ImuFactor(pre, nav_i.frame_id, nav_j.frame_id,
                                         self.config.imu_noise.gravity))

        if self.prior is not None:
            problem.add_factor(self.prior)
        else:
            problem.add_factor(nlls.PosePriorFactor(
                pose_block(self.nav_states[0].frame_id), self.gauge_target,
                np.sqrt(self.config.gauge_prior_weight)))
        batch.finalize()
        if batch.count:
            problem.add_group_factor(batch)
        return problem

    # ------------------------------------------------------------ optimize

    def optimize(self) -> nlls.SolveReport:
        """Initialize features, solve, and write results back to the window."""
        pending = self.initialize_new_features()
        self._drop_degenerate_landmarks()
        self._drop_landmarks_behind_cameras()
        problem = self.build_problem(skip_landmarks=pending)
        values, report = nlls.solve(problem, self.config.solver_options)
        self._write_back(values)
        self._drop_degenerate_landmarks()
        self._refresh_preintegrations()
        return report

    def _drop_landmarks_behind_cameras(self):
        """Remove initialized landmarks that project behind any observing
        camera at the current states; they cannot be linearized."""
        window_fids = set(self.frame_ids())
        cam_inv = {fid: self.camera_pose_of(fid).inverse() for fid in window_fids}
        dead = []
        for lm_id, lm in self.landmarks.items():
            if not lm.initialized:
                continue
            anchor = lm.anchor_observation()
            if self.config.landmark_mode == "1d":
                direction = (anchor.u, anchor.v)
            else:
                direction = (lm.u_anchor, lm.v_anchor)
            p_world = self.camera_pose_of(lm.anchor_index).transform_point(
                vision.back_projection(direction[0], direction[1], lm.inv_depth))
            for fid in lm.observations:
                if fid not in window_fids or fid == lm.anchor_index:
                    continue
                if cam_inv[fid].transform_point(p_world)[2] <= vision.MIN_DEPTH:
                    dead.append(lm_id)
                    break
        for lm_id in dead:
            del self.landmarks[lm_id]

    def _write_back(self, values):
        for nav in self.nav_states:
            nav.pose = values[pose_block(nav.frame_id)].value
            nav.speed_bias = imu_mod.SpeedBias.from_vector(
                values[sb_block(nav.frame_id)].value)
        for lm_id, lm in self.landmarks.items():
            key = lm_block(lm_id)
            if key not in values:
                continue
            state = values[key].value
            if self.config.landmark_mode == "1d":
                lm.inv_depth = float(state[0])
            else:
                lm.u_anchor, lm.v_anchor, lm.inv_depth = map(float, state)
        if self.config.estimate_time_offset and TD_BLOCK in values:
            self.time_offset = float(values[TD_BLOCK].value[0])

    def _drop_degenerate_landmarks(self):
        dead = [lm_id for lm_id, lm in self.landmarks.items()
                if lm.initialized and lm.inv_depth <= MIN_INV_DEPTH]
        for lm_id in dead:
            del self.landmarks[lm_id]

    def _refresh_preintegrations(self):
        """Re-integrate segments whose bias estimate left the linearization
        region of the first-order correction."""
        for idx, (pre, nav) in enumerate(zip(self.preintegrations, self.nav_states)):
            dba, dbg = imu_mod.bias_delta(pre, nav.speed_bias)
            if np.sqrt(dba @ dba + dbg @ dbg) <= imu_mod.REPROPAGATION_THRESHOLD:
                continue
            segment = self.imu_segments[idx]
            if segment is None:
                continue
            self.preintegrations[idx] = imu_mod.integrate(
                segment, nav.speed_bias, self.config.imu_noise)

    # ------------------------------------------------------ marginalization

    def marginalize_and_slide(self):
        """Drop the oldest keyframe (and its landmarks) into the prior."""
        cfg = self.config
        if len(self.nav_states) != cfg.window_size + 1:
            raise ValueError("marginalize_and_slide expects window_size + 1 frames")
        old = self.nav_states[0]
        fid0 = old.frame_id

        dropped_lms = self._reanchor_or_collect(fid0)
        system, layout_ids = self._build_information_system(fid0, dropped_lms)

        drop_set = {pose_block(fid0), sb_block(fid0)}
        drop_set |= {lm_block(lm_id) for lm_id in dropped_lms
                     if self.landmarks[lm_id].initialized}
        lin_point = self._linearization_snapshot(layout_ids)

        if cfg.marginalization_mode == "fast":
            _, prior = marg.fast_marginalize(system, drop_set, cfg.landmark_mode,
                                             lin_point)
        else:
            reduced = marg.dense_schur_oracle(system, drop_set)
            prior = marg.build_prior_factor(reduced, lin_point)
        self.prior = MarginalizationPriorFactor(prior)

        for lm_id in dropped_lms:
            self.landmarks.pop(lm_id, None)
        self.history.append((old.timestamp, old.pose))
        self.nav_states.pop(0)
        self.preintegrations.pop(0)
        self.imu_segments.pop(0)

    def _reanchor_or_collect(self, fid0) -> list:
        """Re-anchor landmarks anchored at the dropped frame when they keep
        at least two observations; return the ids to marginalize."""
        dropped = []
        for lm_id, lm in self.landmarks.items():
            if lm.anchor_index != fid0:
                if fid0 in lm.observations:
                    # cannot happen when anchors are first observations
                    del lm.observations[fid0]
                continue
            remaining = [fid for fid in lm.observations if fid != fid0]
            if len(remaining) < 2 or not lm.initialized:
                dropped.append(lm_id)
                continue
            if not self._reanchor(lm, fid0, min(remaining)):
                dropped.append(lm_id)
        return dropped

    def _reanchor(self, lm, old_fid, new_fid) -> bool:
        """Re-express the landmark state in the next-oldest observing frame."""
        old_obs = lm.observations[old_fid]
        if self.config.landmark_mode == "1d":
            direction = (old_obs.u, old_obs.v)
        else:
            direction = (lm.u_anchor, lm.v_anchor)
        point_world = self.camera_pose_of(old_fid).transform_point(
            vision.back_projection(direction[0], direction[1], lm.inv_depth))
        p_new = self.camera_pose_of(new_fid).inverse().transform_point(point_world)
        if p_new[2] <= vision.MIN_DEPTH:
            return False
        lm.anchor_index = new_fid
        lm.inv_depth = 1.0 / float(p_new[2])
        if self.config.landmark_mode == "3d":
            lm.u_anchor = float(p_new[0] / p_new[2])
            lm.v_anchor = float(p_new[1] / p_new[2])
        del lm.observations[old_fid]
        return True

    def _build_information_system(self, fid0, dropped_lms):
        """Linearize every factor touching the dropped frame into (H, b).

        Kept landmarks no longer reference the dropped frame, so the system
        contains the dropped landmarks, the dropped nav state, and every
        remaining state those factors touch (including the prior's blocks).
        """
        cfg = self.config
        # before the window is observable (or when configured off) the time
        # offset stays out of the prior: dropped factors are then evaluated
        # at the current offset without coupling to it, so stale early
        # estimates cannot accumulate into marginalized information
        td_in_prior = (cfg.estimate_time_offset and self.td_active
                       and cfg.time_offset_in_prior)
        batch = VisionBatch(cfg.landmark_mode, self.extrinsics, cfg.weights,
                            estimate_td=td_in_prior, fixed_td=self.time_offset)
        sub = nlls.Problem(prepare=batch.prepare)
        for nav in self.nav_states:
            sub.add_block(nlls.ParameterBlock(pose_block(nav.frame_id), "pose", nav.pose))
            sub.add_block(nlls.ParameterBlock(sb_block(nav.frame_id), "vector",
                                              nav.speed_bias.as_vector()))
        if td_in_prior:
            sub.add_block(nlls.ParameterBlock(TD_BLOCK, "vector",
                                              np.array([self.time_offset])))
        lm_kind = "landmark_1d" if cfg.landmark_mode == "1d" else "landmark_3d"
        window_fids = set(self.frame_ids())
        for lm_id in dropped_lms:
            lm = self.landmarks[lm_id]
            if not lm.initialized:
                continue
            self._add_landmark_factors(sub, batch, lm_id, lm, window_fids,
                                       estimate_td=td_in_prior,
                                       fixed_td=self.time_offset)

        sub.add_factor(ImuFactor(self.preintegrations[0], fid0,
                                 self.nav_states[1].frame_id,
                                 cfg.imu_noise.gravity))
        if self.prior is not None:
            sub.add_factor(self.prior)
        else:
            sub.add_factor(nlls.PosePriorFactor(
                pose_block(fid0), self.gauge_target,
                np.sqrt(cfg.gauge_prior_weight)))
        batch.finalize()
        if batch.count:
            sub.add_group_factor(batch)

        values = dict(sub.blocks)
        _, _, H, g, index = nlls._linearize(sub, values)

        # restrict to blocks actually touched by the linearized factors
        touched = set()
        for f in sub.factors:
            touched.update(f.block_ids)
        for grp in sub.groups:
            touched.update(grp.touched_blocks())
        layout = []
        for bid in values:
            if bid not in touched:
                continue
            if bid == TD_BLOCK:
                layout.append((bid, "time_offset"))
            elif bid[0] == "p":
                layout.append((bid, "pose"))
            elif bid[0] == "sb":
                layout.append((bid, "speed_bias"))
            else:
                layout.append((bid, lm_kind))
        sel = np.concatenate([np.arange(index[bid].start, index[bid].stop)
                              for bid, _ in layout])
        system = marg.InformationSystem(H[np.ix_(sel, sel)], g[sel], layout)
        return system, [bid for bid, _ in layout]

    def _linearization_snapshot(self, layout_ids) -> dict:
        snap = {}
        for bid in layout_ids:
            if bid == TD_BLOCK:
                snap[bid] = np.array([self.time_offset])
            elif bid[0] == "p":
                snap[bid] = self.nav_by_frame(bid[1]).pose
            elif bid[0] == "sb":
                snap[bid] = self.nav_by_frame(bid[1]).speed_bias.as_vector().copy()
        return snap

    # ----------------------------------------------------------- trajectory

    def current_trajectory(self):
        """Marginalized-out poses followed by the live window poses."""
        return self.history + [(n.timestamp, n.pose) for n in self.nav_states]


# ----------------------------------------------------------------- pipeline

def _interpolate_sample(s0, s1, t):
    a = (t - s0.timestamp) / (s1.timestamp - s0.timestamp)
    return imu_mod.ImuSample(t, s0.gyro + a * (s1.gyro - s0.gyro),
                             s0.accel + a * (s1.accel - s0.accel))


def slice_imu(samples, t0: float, t1: float):
    """Samples covering [t0, t1] with linearly interpolated boundaries."""
    inner = [s for s in samples if t0 < s.timestamp < t1]
    before = [s for s in samples if s.timestamp <= t0]
    after = [s for s in samples if s.timestamp >= t1]
    out = []
    if before and before[-1].timestamp == t0:
        out.append(before[-1])
    elif before and (inner or after):
        nxt = inner[0] if inner else after[0]
        out.append(_interpolate_sample(before[-1], nxt, t0))
    out.extend(inner)
    if after and after[0].timestamp == t1:
        out.append(after[0])
    elif after and out:
        out.append(_interpolate_sample(out[-1], after[0], t1))
    if len(out) < 2:
        raise NonMonotonicTimestamps(f"no IMU coverage for [{t0}, {t1}]")
    return out


def bootstrap_nav_state(dataset: sim.Dataset, config: EstimatorConfig) -> NavState:
    """First navigation state: ground truth perturbed by the configured
    sigmas; the rotation perturbation is about the gravity axis so the
    6-DOF gauge prior stays consistent with the accelerometer."""
    rng = sim.rng_for(config.seed, "bootstrap")
    t0, pose0 = dataset.ground_truth[0]
    t1, pose1 = dataset.ground_truth[1]
    v0 = (pose1.t - pose0.t) / (t1 - t0)
    yaw = rng.normal(0.0, config.bootstrap_yaw_sigma)
    dpos = rng.normal(0.0, config.bootstrap_position_sigma, 3)
    dvel = rng.normal(0.0, config.bootstrap_velocity_sigma, 3)
    pose = geo.Pose(geo.quat_multiply(geo.quat_exp(np.array([0.0, 0.0, yaw])), pose0.q),
                    pose0.t + dpos)
    sb = imu_mod.SpeedBias(v0 + dvel, np.zeros(3), np.zeros(3))
    return NavState(pose, sb, t0, frame_id=0)


def run_estimator(dataset: sim.Dataset, config: EstimatorConfig,
                  extrinsics: geo.Extrinsics | None = None):
    """Stream a dataset through the sliding window estimator.

    Returns (trajectory, window, RunReport); on divergence the report
    carries the failing keyframe and the trajectory is partial.
    """
    config.validate()
    window = SlidingWindow(config, extrinsics)
    report = RunReport()
    by_kf = dataset.observations_by_keyframe()
    n_kf = dataset.keyframe_count()
    stamps = [t for t, _ in dataset.ground_truth]

    nav0 = bootstrap_nav_state(dataset, config)
    window.add_keyframe(nav0, None, _obs_map(by_kf.get(0, [])))

    try:
        for k in range(1, n_kf):
            prev = window.nav_states[-1]
            segment = slice_imu(dataset.imu, stamps[k - 1], stamps[k])
            pre = imu_mod.integrate(segment, prev.speed_bias, config.imu_noise)
            pose_guess, v_guess = imu_mod.predict_state(
                prev.pose, prev.speed_bias, pre, config.imu_noise.gravity)
            sb_guess = imu_mod.SpeedBias(v_guess, prev.speed_bias.bias_accel.copy(),
                                         prev.speed_bias.bias_gyro.copy())
            nav = NavState(pose_guess, sb_guess, stamps[k], frame_id=k)
            window.add_keyframe(nav, pre, _obs_map(by_kf.get(k, [])), segment)

            if len(window.nav_states) > config.window_size:
                window.td_active = True
            solve_report = window.optimize()
            report.solve_reports.append(solve_report)
            if config.estimate_time_offset:
                report.time_offset_trace.append(window.time_offset)
            if len(window.nav_states) > config.window_size:
                window.marginalize_and_slide()
    except DvioError as err:
        report.diverged = True
        report.failed_at = k
        report.error = str(err)

    return window.current_trajectory(), window, report


def _obs_map(records):
    return {rec.landmark_id: vision.Observation(rec.kf_index, rec.u, rec.v,
                                                rec.depth, rec.timestamp)
            for rec in records}
