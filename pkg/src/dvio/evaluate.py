"""Trajectory error metrics: rigid alignment, ATE RMSE, and RPE RMSE.

A trajectory is an ordered list of (timestamp, Pose). The absolute error
aligns the estimate to the ground truth with a least-squares rigid
transform (no scale; the system is metric) and reports the RMSE of the
translational residuals. The relative error compares consecutive-frame
motions and needs no alignment.
"""
from __future__ import annotations

import csv

import numpy as np

from . import geometry as geo
from .errors import DegenerateGeometry, NoMatches


def associate(gt, est, max_dt: float):
    """Greedy nearest-timestamp matching, each frame used at most once.

    Returns (i, j) index pairs in time order; pairs farther apart than
    max_dt are discarded.
    """
    candidates = []
    for i, (ti, _) in enumerate(gt):
        for j, (tj, _) in enumerate(est):
            dt = abs(ti - tj)
            if dt <= max_dt:
                candidates.append((dt, i, j))
    candidates.sort()
    used_i, used_j = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoMatches(f"no timestamp pairs within {max_dt} s")
    pairs.sort(key=lambda p: gt[p[0]][0])
    return pairs


def default_max_dt(gt) -> float:
    """Half the median ground-truth frame interval."""
    times = np.array([t for t, _ in gt])
    if times.size < 2:
        return np.inf
    return 0.5 * float(np.median(np.diff(times)))


def align_rigid(gt, est, pairs) -> geo.Pose:
    """Least-squares rigid transform S minimizing ||S * p_est - p_gt||^2.

    Closed-form correspondence solution (SVD of the cross-covariance with
    reflection handling); raises DegenerateGeometry for fewer than three
    pairs or collinear/coincident paired positions.
    """
    if len(pairs) < 3:
        raise DegenerateGeometry("need at least 3 paired positions")
    P = np.array([est[j][1].t for _, j in pairs])
    Q = np.array([gt[i][1].t for i, _ in pairs])
    mp = P.mean(axis=0)
    mq = Q.mean(axis=0)
    Pc = P - mp
    Qc = Q - mq
    W = Qc.T @ Pc
    # collinear or coincident points leave a rotation unobservable
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateGeometry("paired positions are collinear or coincident")
    U, _, Vt = np.linalg.svd(W)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mq - R @ mp
    return geo.Pose(geo.matrix_to_quat(R), t)


def translation_errors(gt, est, pairs, S: geo.Pose) -> np.ndarray:
    """Per-pair translational residuals after applying the alignment."""
    out = np.empty((len(pairs), 3))
    for n, (i, j) in enumerate(pairs):
        out[n] = S.transform_point(est[j][1].t) - gt[i][1].t
    return out


def ate_rmse(gt, est, max_dt: float | None = None) -> float:
    """RMSE of absolute translational errors after rigid alignment."""
    if max_dt is None:
        max_dt = default_max_dt(gt)
    pairs = associate(gt, est, max_dt)
    S = align_rigid(gt, est, pairs)
    errors = translation_errors(gt, est, pairs, S)
    return float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1))))


def relative_pose_errors(gt, est, pairs) -> list[geo.Pose]:
    """E_n = (Q_n^-1 Q_{n+1})^-1 (P_n^-1 P_{n+1}) over consecutive pairs."""
    out = []
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        dq = gt[i0][1].inverse().compose(gt[i1][1])
        dp = est[j0][1].inverse().compose(est[j1][1])
        out.append(dq.inverse().compose(dp))
    return out


def rpe_rmse(gt, est, max_dt: float | None = None) -> float:
    """RMSE of consecutive-frame relative translational errors."""
    if max_dt is None:
        max_dt = default_max_dt(gt)
    pairs = associate(gt, est, max_dt)
    if len(pairs) < 2:
        raise NoMatches("RPE needs at least two associated pairs")
    errors = relative_pose_errors(gt, est, pairs)
    sq = sum(float(e.t @ e.t) for e in errors)
    return float(np.sqrt(sq / len(errors)))


def write_metrics_csv(path, rows) -> None:
    """rows: iterables of (sequence, mode, ate_rmse, rpe_rmse, n_frames)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "mode", "ate_rmse", "rpe_rmse", "n_frames"])
        for row in rows:
            w.writerow(list(row))


def write_per_frame_errors_csv(path, gt, est, max_dt: float | None = None) -> None:
    """Plot-ready per-frame absolute errors: timestamp plus error components."""
    if max_dt is None:
        max_dt = default_max_dt(gt)
    pairs = associate(gt, est, max_dt)
    S = align_rigid(gt, est, pairs)
    errors = translation_errors(gt, est, pairs, S)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "ex", "ey", "ez", "norm"])
        for (i, _), e in zip(pairs, errors):
            w.writerow([repr(float(gt[i][0]))] + [repr(float(x)) for x in e]
                       + [repr(float(np.linalg.norm(e)))])
