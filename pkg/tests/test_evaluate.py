import numpy as np
import pytest

from dvio import evaluate as ev
from dvio import geometry as geo
from dvio.errors import DegenerateGeometry, NoMatches


def make_traj(positions, times=None, rotations=None):
    n = len(positions)
    times = times if times is not None else [0.1 * k for k in range(n)]
    out = []
    for k in range(n):
        q = rotations[k] if rotations is not None else np.array([1.0, 0, 0, 0])
        out.append((times[k], geo.Pose(q, np.asarray(positions[k], dtype=float))))
    return out


def random_traj(rng, n=20, step=0.1):
    poses = []
    p = rng.uniform(-1, 1, 3)
    q = geo.quat_exp(rng.uniform(-0.5, 0.5, 3))
    for k in range(n):
        p = p + rng.uniform(-0.2, 0.2, 3)
        q = geo.quat_multiply(geo.quat_exp(rng.uniform(-0.1, 0.1, 3)), q)
        poses.append((k * step, geo.Pose(q, p.copy())))
    return poses


def test_associate_cases():
    gt = make_traj([[0, 0, 0]] * 5)
    est = make_traj([[0, 0, 0]] * 5)
    pairs = ev.associate(gt, est, max_dt=0.05)
    assert pairs == [(k, k) for k in range(5)]

    est_off = [(t + 0.025, p) for t, p in est]
    pairs = ev.associate(gt, est_off, max_dt=0.05)
    assert pairs == [(k, k) for k in range(5)]

    est_far = [(t + 0.1001, p) for t, p in est]
    # offset beyond max_dt leaves nearest-neighbour pairs off by one frame;
    # shifting by more than the whole span gives no matches at all
    est_gone = [(t + 10.0, p) for t, p in est]
    with pytest.raises(NoMatches):
        ev.associate(gt, est_gone, max_dt=0.05)
    del est_far


def test_align_identity_and_known_transform():
    rng = np.random.default_rng(0)
    gt = random_traj(rng)
    pairs = [(k, k) for k in range(len(gt))]
    S = ev.align_rigid(gt, gt, pairs)
    assert geo.pose_is_close(S, geo.Pose.identity(), 1e-10, 1e-10)

    T = geo.Pose(geo.quat_exp(np.array([0.3, -0.2, 0.5])), np.array([1.0, -2.0, 0.5]))
    est = [(t, T.compose(p)) for t, p in gt]
    S = ev.align_rigid(gt, est, pairs)
    assert geo.pose_is_close(S, T.inverse(), 1e-10, 1e-10)


def test_align_degenerate_geometry():
    gt = make_traj([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    with pytest.raises(DegenerateGeometry):
        ev.align_rigid(gt, gt, [(k, k) for k in range(4)])
    with pytest.raises(DegenerateGeometry):
        ev.align_rigid(gt[:2], gt[:2], [(0, 0), (1, 1)])


def test_align_beats_local_grid_search():
    # noisy correspondences on a 4-point cloud; the closed form must be at
    # least as good as any perturbation on a 1e-3 grid around it
    rng = np.random.default_rng(1)
    gt = make_traj(rng.uniform(-2, 2, (4, 3)))
    T = geo.Pose(geo.quat_exp(np.array([0.2, 0.1, -0.4])), np.array([0.5, 0.3, -0.7]))
    est = [(t, geo.Pose(p.q, T.compose(p).t + rng.normal(0, 0.05, 3))) for t, p in gt]
    pairs = [(k, k) for k in range(4)]
    S = ev.align_rigid(gt, est, pairs)

    def cost(pose):
        return float(np.sum(ev.translation_errors(gt, est, pairs, pose) ** 2))

    best = cost(S)
    steps = np.array([-2, -1, 0, 1, 2]) * 1e-3
    grid_best = np.inf
    for dx in steps:
        for dy in steps:
            for dz in steps:
                for rx in steps:
                    for ry in steps:
                        for rz in steps:
                            cand = S.retract(np.array([dx, dy, dz, rx, ry, rz]))
                            grid_best = min(grid_best, cost(cand))
    assert best <= grid_best + 1e-12


def test_ate_trivial_cases():
    rng = np.random.default_rng(2)
    gt = random_traj(rng)
    assert ev.ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)

    shift = geo.Pose(np.array([1.0, 0, 0, 0]), np.array([5.0, 0.0, 0.0]))
    est = [(t, shift.compose(p)) for t, p in gt]
    assert ev.ate_rmse(gt, est) == pytest.approx(0.0, abs=1e-10)


def test_ate_three_pose_fixture():
    # centered simplex scaled so each post-alignment error has norm 0.1;
    # shrinking toward the centroid keeps the identity alignment optimal
    c = 2.0
    base = np.array([[c, 0, 0], [0, c, 0], [0, 0, c]])
    center = base.mean(axis=0)
    centered = base - center
    norm = np.linalg.norm(centered[0])
    alpha = 0.1 / norm
    gt = make_traj(base)
    est = make_traj(base - alpha * centered)
    assert ev.ate_rmse(gt, est) == pytest.approx(0.1, abs=1e-12)


def test_ate_invariant_to_rigid_transform_of_estimate():
    rng = np.random.default_rng(3)
    gt = random_traj(rng)
    est = [(t, geo.Pose(p.q, p.t + rng.normal(0, 0.05, 3))) for t, p in gt]
    base = ev.ate_rmse(gt, est)
    assert base >= 0.0
    for _ in range(10):
        G = geo.Pose(geo.quat_exp(rng.uniform(-2, 2, 3)), rng.uniform(-10, 10, 3))
        moved = [(t, G.compose(p)) for t, p in est]
        assert ev.ate_rmse(gt, moved) == pytest.approx(base, abs=1e-9)


def test_rpe_trivial_and_constant_offset():
    rng = np.random.default_rng(4)
    gt = random_traj(rng)
    assert ev.rpe_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)

    # every consecutive step overshoots by (0.01, 0, 0) in the step frame
    T_err = geo.Pose(np.array([1.0, 0, 0, 0]), np.array([0.01, 0.0, 0.0]))
    est = [gt[0]]
    for (t0, q0), (t1, q1) in zip(gt, gt[1:]):
        rel = q0.inverse().compose(q1).compose(T_err)
        est.append((t1, est[-1][1].compose(rel)))
    assert ev.rpe_rmse(gt, est) == pytest.approx(0.01, abs=1e-12)


def test_rpe_matches_naive_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(3, 15))
        gt = random_traj(rng, n=n)
        est = [(t, geo.Pose(geo.quat_multiply(geo.quat_exp(rng.normal(0, 0.05, 3)), p.q),
                            p.t + rng.normal(0, 0.1, 3))) for t, p in gt]
        value = ev.rpe_rmse(gt, est)

        total = 0.0
        for k in range(n - 1):
            Qrel = np.linalg.inv(gt[k][1].matrix()) @ gt[k + 1][1].matrix()
            Prel = np.linalg.inv(est[k][1].matrix()) @ est[k + 1][1].matrix()
            E = np.linalg.inv(Qrel) @ Prel
            total += float(E[:3, 3] @ E[:3, 3])
        oracle = np.sqrt(total / (n - 1))
        assert value == pytest.approx(oracle, abs=1e-12)


def test_rpe_left_invariance():
    rng = np.random.default_rng(6)
    gt = random_traj(rng)
    est = [(t, geo.Pose(p.q, p.t + rng.normal(0, 0.05, 3))) for t, p in gt]
    base = ev.rpe_rmse(gt, est)
    G = geo.Pose(geo.quat_exp(rng.uniform(-2, 2, 3)), rng.uniform(-5, 5, 3))
    gt2 = [(t, G.compose(p)) for t, p in gt]
    est2 = [(t, G.compose(p)) for t, p in est]
    assert ev.rpe_rmse(gt2, est2) == pytest.approx(base, abs=1e-12)


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    ev.write_metrics_csv(path, [("seq", "dvio_1d", 0.01, 0.002, 100)])
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "sequence,mode,ate_rmse,rpe_rmse,n_frames"
    assert lines[1].startswith("seq,dvio_1d,0.01,0.002,100")
