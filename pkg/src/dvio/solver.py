"""Damped Gauss-Newton minimizer over manifold-valued parameter blocks.

Factors supply whitened residuals and Jacobians on tangent
parameterizations; robust factors are handled by reweighting with the
loss derivative. The total cost is the plain squared norm (no 1/2
factor): sum of loss(||r||^2) over factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import DvioError, NumericalFailure
from .marginalization import ldl_solve_clamped
from .vision import cauchy_loss


@dataclass
class ParameterBlock:
    """One optimization variable: an SE(3) pose or a plain vector.

    bounds, when set on a vector block, clamp the value after every
    retraction (used for the time offset).
    """

    id: object
    kind: str  # "pose" | "vector"
    value: object
    bounds: tuple[float, float] | None = None

    @property
    def tangent_dim(self) -> int:
        return 6 if self.kind == "pose" else len(self.value)

    def retract(self, delta: np.ndarray) -> "ParameterBlock":
        if self.kind == "pose":
            return ParameterBlock(self.id, self.kind, self.value.retract(delta))
        value = self.value + delta
        if self.bounds is not None:
            value = np.clip(value, self.bounds[0], self.bounds[1])
        return ParameterBlock(self.id, self.kind, value, self.bounds)


@dataclass
class Problem:
    """Factor list over parameter blocks, with an optional shared-context hook.

    prepare(values) is called once per evaluation point and its result is
    passed to every factor, so per-pair geometry can be computed once
    instead of per landmark. Factors expose block_ids, loss ("none" or
    "cauchy"), loss_scale, and evaluate(values, ctx, with_jacobians).

    A group factor evaluates many same-shaped residuals in one vectorized
    pass: it exposes cost_only(values, ctx) -> per-residual costs and
    accumulate(values, ctx, H, g, block_cols) -> per-residual costs, and
    must not reference fixed blocks.
    """

    blocks: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    fixed: set = field(default_factory=set)
    prepare: object = None

    def add_block(self, block: ParameterBlock):
        self.blocks[block.id] = block

    def add_factor(self, factor):
        for bid in factor.block_ids:
            if bid not in self.blocks:
                raise KeyError(f"factor references unknown block {bid!r}")
        self.factors.append(factor)

    def add_group_factor(self, group):
        self.groups.append(group)

    def context(self, values: dict):
        return self.prepare(values) if self.prepare is not None else None


@dataclass
class SolverOptions:
    max_iterations: int = 20
    initial_lambda: float = 1e-4
    lambda_increase: float = 10.0
    lambda_decrease: float = 0.5
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    function_tolerance: float = 1e-9  # relative cost decrease per accepted step
    max_lambda: float = 1e14


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str  # converged_gradient | converged_step | max_iterations | failure
    cost_trace: list[float]


def _solve_normal_equations(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense solve: LAPACK when well-conditioned, clamped-pivot LDL else."""
    try:
        x = np.linalg.solve(A, b)
        if np.isfinite(x).all():
            return x
    except np.linalg.LinAlgError:
        pass
    return ldl_solve_clamped(A, b)


def _factor_cost(residual: np.ndarray, factor) -> float:
    s = float(residual @ residual)
    if factor.loss == "cauchy":
        return cauchy_loss(s, factor.loss_scale)[0]
    return s


def evaluate(problem: Problem, values: dict):
    """(total cost, per-factor costs, gradient infinity norm) at given values."""
    total, per_factor, _, g, _ = _linearize(problem, values)
    grad_norm = float(np.abs(g).max()) if g.size else 0.0
    return total, per_factor, grad_norm


def _free_index(problem: Problem, values: dict):
    index = {}
    offset = 0
    for bid, block in values.items():
        if bid in problem.fixed:
            continue
        index[bid] = slice(offset, offset + block.tangent_dim)
        offset += block.tangent_dim
    return index, offset


def _cost_only(problem: Problem, values: dict) -> float:
    ctx = problem.context(values)
    total = 0.0
    for factor in problem.factors:
        r = factor.evaluate(values, ctx, with_jacobians=False)[0]
        total += _factor_cost(r, factor)
    for group in problem.groups:
        total += float(np.sum(group.cost_only(values, ctx)))
    return total


def _find_nonfinite_factor(problem: Problem, values: dict):
    """Slow diagnosis pass run only after a non-finite assembly."""
    ctx = problem.context(values)
    for fid, factor in enumerate(problem.factors):
        r, jacobians = factor.evaluate(values, ctx, with_jacobians=True)
        if not np.all(np.isfinite(r)):
            raise NumericalFailure("non-finite residual", factor_id=fid)
        for J in jacobians or ():
            if J is not None and not np.all(np.isfinite(J)):
                raise NumericalFailure("non-finite Jacobian", factor_id=fid)
    raise NumericalFailure("non-finite normal equations", factor_id=None)


class _Assembler:
    """Normal-equation assembly with per-factor index arrays cached across
    iterations of one solve."""

    def __init__(self, problem: Problem, values: dict):
        self.problem = problem
        self.index, self.dim = _free_index(problem, values)
        self.block_cols = {bid: np.arange(sl.start, sl.stop)
                           for bid, sl in self.index.items()}

    def linearize(self, values: dict):
        problem = self.problem
        H = np.zeros((self.dim, self.dim))
        g = np.zeros(self.dim)
        total = 0.0
        per_factor = []
        ctx = problem.context(values)
        fixed = problem.fixed
        cols_of = self.block_cols
        for factor in problem.factors:
            r, jacobians = factor.evaluate(values, ctx, with_jacobians=True)
            s = float(r @ r)
            weight = 1.0
            if factor.loss == "cauchy":
                rho, drho, _ = cauchy_loss(s, factor.loss_scale)
                total += rho
                weight = drho
                per_factor.append(rho)
            else:
                total += s
                per_factor.append(s)

            parts = [(J, cols_of[bid]) for bid, J in zip(factor.block_ids, jacobians)
                     if bid not in fixed and J is not None]
            if not parts:
                continue
            if len(parts) == 1:
                J_full, idx = parts[0]
            else:
                J_full = np.concatenate([p[0] for p in parts], axis=1)
                idx = np.concatenate([p[1] for p in parts])
            JT = J_full.T
            g[idx] += weight * (JT @ r)
            H[np.ix_(idx, idx)] += weight * (JT @ J_full)
        for group in problem.groups:
            costs = group.accumulate(values, ctx, H, g, cols_of)
            total += float(np.sum(costs))
            per_factor.extend(costs.tolist())
        if not (np.isfinite(total) and np.isfinite(H).all() and np.isfinite(g).all()):
            _find_nonfinite_factor(problem, values)
        return total, per_factor, H, g, self.index


def _linearize(problem: Problem, values: dict):
    """Assemble cost, per-factor costs, normal matrix, gradient-half and index."""
    return _Assembler(problem, values).linearize(values)


def solve(problem: Problem, options: SolverOptions | None = None):
    """Levenberg-Marquardt iteration; returns (values, SolveReport).

    The accepted-step cost trace is monotone non-increasing; manifold
    blocks are updated through their tangent retraction.
    """
    options = options or SolverOptions()
    values = dict(problem.blocks)
    assembler = _Assembler(problem, values)
    cost, _, H, g, index = assembler.linearize(values)
    initial_cost = cost
    trace = [cost]
    lam = options.initial_lambda
    termination = "max_iterations"
    iterations = 0

    for _ in range(options.max_iterations):
        if g.size == 0 or float(np.abs(g).max()) < options.gradient_tolerance:
            termination = "converged_gradient"
            break
        damp = np.clip(np.diagonal(H), 1e-12, None)
        accepted = False
        while lam <= options.max_lambda:
            step = -_solve_normal_equations(H + lam * np.diag(damp), g)
            candidate = {bid: (block.retract(step[index[bid]])
                               if bid in index else block)
                         for bid, block in values.items()}
            try:
                new_cost = _cost_only(problem, candidate)
            except DvioError:
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost <= cost:
                values = candidate
                previous_cost = cost
                cost = new_cost
                lam = max(lam * options.lambda_decrease, 1e-12)
                accepted = True
                break
            lam *= options.lambda_increase
        iterations += 1
        if not accepted:
            termination = "converged_step"
            break
        trace.append(cost)
        if float(np.linalg.norm(step)) < options.step_tolerance:
            termination = "converged_step"
            break
        if previous_cost - cost <= options.function_tolerance * max(previous_cost, 1e-300):
            termination = "converged_step"
            break
        cost, _, H, g, index = assembler.linearize(values)

    report = SolveReport(iterations=iterations, initial_cost=initial_cost,
                         final_cost=cost, termination=termination, cost_trace=trace)
    return values, report


# --------------------------------------------------------- generic factors

class VectorResidualFactor:
    """Plain residual function over vector blocks, for priors and tests."""

    def __init__(self, block_ids, fn, loss="none", loss_scale=1.0):
        self.block_ids = tuple(block_ids)
        self._fn = fn
        self.loss = loss
        self.loss_scale = loss_scale

    def evaluate(self, values, ctx, with_jacobians):
        vals = [values[b].value for b in self.block_ids]
        return self._fn(vals, with_jacobians)


class PosePriorFactor:
    """6-DOF prior pinning a pose block; used to fix the gauge."""

    def __init__(self, block_id, target: geo.Pose, sqrt_weight: float):
        self.block_ids = (block_id,)
        self.target = target
        self.sqrt_weight = sqrt_weight
        self.loss = "none"
        self.loss_scale = 1.0

    def evaluate(self, values, ctx, with_jacobians):
        pose = values[self.block_ids[0]].value
        delta = pose.local_delta(self.target)
        r = self.sqrt_weight * delta
        if not with_jacobians:
            return r, None
        J = np.zeros((6, 6))
        J[0:3, 0:3] = self.sqrt_weight * np.eye(3)
        J[3:6, 3:6] = self.sqrt_weight * geo.so3_left_jacobian_inverse(delta[3:6])
        return r, (J,)
