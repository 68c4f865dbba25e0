import numpy as np
import pytest

from dvio import geometry as geo
from dvio import solver
from dvio.errors import NumericalFailure


def vector_block(bid, values):
    return solver.ParameterBlock(bid, "vector", np.asarray(values, dtype=float))


def test_scalar_quadratic():
    problem = solver.Problem()
    problem.add_block(vector_block("x", [0.0]))

    def fn(vals, with_jacobians):
        r = np.array([vals[0][0] - 3.0])
        return r, (np.array([[1.0]]),) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["x"], fn))
    values, report = solver.solve(problem)
    assert abs(values["x"].value[0] - 3.0) < 1e-10
    assert report.iterations <= 3
    assert report.termination in ("converged_gradient", "converged_step")
    assert report.final_cost <= report.initial_cost


def test_rotation_averaging_geodesic_midpoint():
    q1 = geo.quat_exp(np.array([0.0, 0.0, 0.0]))
    q2 = geo.quat_exp(np.array([np.deg2rad(10.0), 0.0, 0.0]))
    problem = solver.Problem()
    problem.add_block(solver.ParameterBlock("p", "pose", geo.Pose(q1, np.zeros(3))))
    problem.add_factor(solver.PosePriorFactor("p", geo.Pose(q1, np.zeros(3)), 1.0))
    problem.add_factor(solver.PosePriorFactor("p", geo.Pose(q2, np.zeros(3)), 1.0))
    values, report = solver.solve(problem)

    mid = geo.quat_multiply(q1, geo.quat_exp(
        0.5 * geo.quat_log(geo.quat_multiply(geo.quat_conjugate(q1), q2))))
    err = geo.quat_angle(geo.quat_multiply(values["p"].value.q, geo.quat_conjugate(mid)))
    assert err < 1e-8
    assert np.linalg.norm(values["p"].value.t) < 1e-10


def test_cauchy_line_fit_rejects_outliers():
    rng = np.random.default_rng(0)
    n = 60
    xs = np.linspace(0, 1, n)
    slope, intercept = 2.0, -0.5
    ys = slope * xs + intercept + rng.normal(0, 0.01, n)
    outliers = rng.choice(n, size=int(0.3 * n), replace=False)
    ys[outliers] += rng.uniform(1.0, 3.0, outliers.size) * rng.choice([-1, 1], outliers.size)

    inliers = np.setdiff1d(np.arange(n), outliers)
    A = np.vstack([xs[inliers], np.ones(inliers.size)]).T
    ref_slope = np.linalg.lstsq(A, ys[inliers], rcond=None)[0][0]

    problem = solver.Problem()
    problem.add_block(vector_block("ab", [0.0, 0.0]))
    sigma = 0.01

    def make_fn(x, y):
        def fn(vals, with_jacobians):
            a, b = vals[0]
            r = np.array([(a * x + b - y) / sigma])
            J = np.array([[x / sigma, 1.0 / sigma]])
            return r, (J,) if with_jacobians else None
        return fn

    for x, y in zip(xs, ys):
        problem.add_factor(solver.VectorResidualFactor(
            ["ab"], make_fn(x, y), loss="cauchy", loss_scale=1.0))
    values, _ = solver.solve(problem, solver.SolverOptions(max_iterations=50))
    assert abs(values["ab"].value[0] - ref_slope) < 1e-2


def test_evaluate_examples():
    problem = solver.Problem()
    problem.add_block(vector_block("x", [1.0]))
    cost, per_factor, grad = solver.evaluate(problem, dict(problem.blocks))
    assert cost == 0.0 and per_factor == []

    def fn(vals, with_jacobians):
        r = np.array([3.0, 4.0])
        J = np.zeros((2, 1))
        return r, (J,) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["x"], fn))
    cost, per_factor, _ = solver.evaluate(problem, dict(problem.blocks))
    assert cost == pytest.approx(25.0)
    assert per_factor == [pytest.approx(25.0)]


def test_fixed_blocks_do_not_move():
    problem = solver.Problem()
    problem.add_block(vector_block("x", [0.0]))
    problem.add_block(vector_block("y", [0.0]))
    problem.fixed.add("y")

    def fn(vals, with_jacobians):
        r = np.array([vals[0][0] + vals[1][0] - 2.0])
        return r, (np.array([[1.0]]), np.array([[1.0]])) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["x", "y"], fn))
    values, _ = solver.solve(problem)
    assert values["y"].value[0] == 0.0
    assert abs(values["x"].value[0] - 2.0) < 1e-7


def test_bounds_clamp_retraction():
    problem = solver.Problem()
    problem.add_block(solver.ParameterBlock("x", "vector", np.array([0.0]),
                                            bounds=(-0.1, 0.1)))

    def fn(vals, with_jacobians):
        r = np.array([vals[0][0] - 3.0])
        return r, (np.array([[1.0]]),) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["x"], fn))
    values, _ = solver.solve(problem)
    assert values["x"].value[0] == pytest.approx(0.1)


def mixed_problem():
    rng = np.random.default_rng(1)
    problem = solver.Problem()
    pose = geo.Pose(geo.quat_exp(rng.normal(scale=0.2, size=3)), rng.normal(size=3))
    problem.add_block(solver.ParameterBlock("p", "pose", pose))
    problem.add_block(vector_block("v", rng.normal(size=3)))
    target = geo.Pose(geo.quat_exp(np.array([0.1, -0.2, 0.3])), np.array([1.0, 2.0, 3.0]))
    problem.add_factor(solver.PosePriorFactor("p", target, 2.0))

    def fn(vals, with_jacobians):
        v = vals[0]
        r = np.array([v[0] * v[1] - 1.0, v[2] ** 2 - 2.0, v[0] + v[2]])
        J = np.array([[v[1], v[0], 0.0], [0.0, 0.0, 2 * v[2]], [1.0, 0.0, 1.0]])
        return r, (J,) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["v"], fn, loss="cauchy", loss_scale=2.0))
    return problem


def test_assembled_gradient_matches_finite_differences():
    problem = mixed_problem()
    values = dict(problem.blocks)
    _, _, H, g, index = solver._linearize(problem, values)

    eps = 1e-6
    for bid, sl in index.items():
        dim = sl.stop - sl.start
        for i in range(dim):
            d = np.zeros(dim)
            d[i] = eps
            vp = dict(values)
            vp[bid] = values[bid].retract(d)
            vm = dict(values)
            vm[bid] = values[bid].retract(-d)
            fd = (solver._cost_only(problem, vp) - solver._cost_only(problem, vm)) / (2 * eps)
            analytic = 2.0 * g[sl][i]  # cost gradient is twice the half-gradient
            assert abs(analytic - fd) < 1e-5 * max(1.0, abs(analytic), abs(fd))


def test_deterministic_cost_trace():
    traces = []
    for _ in range(2):
        problem = mixed_problem()
        _, report = solver.solve(problem)
        traces.append(report.cost_trace)
    assert traces[0] == traces[1]


def test_numerical_failure_reports_factor():
    problem = solver.Problem()
    problem.add_block(vector_block("x", [1.0]))

    def ok(vals, with_jacobians):
        r = np.array([vals[0][0]])
        return r, (np.array([[1.0]]),) if with_jacobians else None

    def bad(vals, with_jacobians):
        r = np.array([np.nan])
        return r, (np.array([[1.0]]),) if with_jacobians else None

    problem.add_factor(solver.VectorResidualFactor(["x"], ok))
    problem.add_factor(solver.VectorResidualFactor(["x"], bad))
    with pytest.raises(NumericalFailure) as err:
        solver.solve(problem)
    assert err.value.factor_id == 1
