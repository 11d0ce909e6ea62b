"""Counterexample-removal backends.

Three ways to solve the finitely-constrained problem that accumulates one
constraint per collected counterexample:

* ``remove_penalty`` — L1 exact-penalty descent with an escalating weight
  (first-order, works for any differentiable model),
* ``remove_augment_lsq`` — dataset augmentation plus the closed-form
  least-squares refit (1-D linear regressors),
* ``repair_qp_exact`` — the exact route for linear regressors against
  split linear specifications: two endpoint constraints per property turn
  the whole repair problem into a convex QP, solved directly.

Removal targets a positive satisfaction constant (default 1e-4) rather
than bare non-negativity so repaired constraints hold robustly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import Box, LinReg1D, Model
from .optim import AdamState
from .qp import ConvexQP, QpIterationError, solve_qp
from .specs import (
    DEFAULT_SATISFACTION_CONSTANT,
    AffineSat,
    Property,
    Specification,
    satisfaction,
)


class Objective:
    """Performance measure J over model parameters."""

    def value(self, model: Model) -> float:
        raise NotImplementedError

    def param_gradient(self, model: Model) -> np.ndarray:
        raise NotImplementedError


@dataclass(eq=False)
class MseOnDataset(Objective):
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        T = np.asarray(self.targets, dtype=float)
        self.inputs = X.reshape(X.shape[0], -1)
        self.targets = T.reshape(T.shape[0], -1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same length")

    def value(self, model: Model) -> float:
        residual = model.forward_many(self.inputs) - self.targets
        return float(np.mean(np.sum(residual**2, axis=1)))

    def param_gradient(self, model: Model) -> np.ndarray:
        residual = model.forward_many(self.inputs) - self.targets
        dtheta, _ = model.grad_many(self.inputs, residual)
        return (2.0 / self.inputs.shape[0]) * dtheta


@dataclass(eq=False)
class ParamDistanceSq(Objective):
    """Squared distance to reference parameters."""

    theta0: np.ndarray

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float)

    def value(self, model: Model) -> float:
        d = model.param_vector() - self.theta0
        return float(d @ d)

    def param_gradient(self, model: Model) -> np.ndarray:
        return 2.0 * (model.param_vector() - self.theta0)


class AbsParams(Objective):
    """L1 norm of the parameter vector."""

    def value(self, model: Model) -> float:
        return float(np.sum(np.abs(model.param_vector())))

    def param_gradient(self, model: Model) -> np.ndarray:
        return np.sign(model.param_vector())


@dataclass(eq=False)
class OutputAtPoint(Objective):
    """One network output at a fixed input point."""

    point: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.point = np.atleast_1d(np.asarray(self.point, dtype=float))

    def value(self, model: Model) -> float:
        return float(model.forward(self.point)[self.index])

    def param_gradient(self, model: Model) -> np.ndarray:
        upstream = np.zeros(model.output_dim)
        upstream[self.index] = 1.0
        dtheta, _ = model.grad(self.point, upstream)
        return dtheta


@dataclass(eq=False)
class RemovalProblem:
    """Objective plus the accumulated counterexample constraints."""

    model: Model
    objective: Objective
    counterexamples: list[tuple[Property, list[np.ndarray]]] = field(default_factory=list)
    satisfaction_constant: float = DEFAULT_SATISFACTION_CONSTANT

    def constraint_count(self) -> int:
        return sum(len(xs) for _, xs in self.counterexamples)


@dataclass(eq=False)
class RemovalReport:
    params: np.ndarray
    success: bool
    iterations: int = 0
    final_penalty_weight: float | None = None
    objective: float = float("nan")
    detail: str = ""


@dataclass
class PenaltyConfig:
    lr: float = 1e-3
    max_iters: int = 5000
    weight_growth: float = 2.0
    max_weight_escalations: int = 16
    init_weight: float = 2.0**-4
    # optional per-coordinate step scaling for badly scaled parameter spaces
    # (e.g. a slope that lives on a 1/key scale next to an O(1) intercept)
    param_scale: np.ndarray | None = None


class _ConstraintBatch:
    """Stored counterexamples flattened for vectorized evaluation.

    One forward pass covers every constraint; points with plain affine
    satisfaction functions (the overwhelmingly common case) are evaluated
    in a single batched product, the rest per property group.
    """

    def __init__(self, groups):
        points = []
        sat_fns = []
        for prop, xs in groups:
            for x in xs:
                points.append(np.atleast_1d(np.asarray(x, dtype=float)))
                sat_fns.append(prop.sat_fn)
        self.size = len(points)
        if not self.size:
            self.X = np.zeros((0, 1))
            return
        self.X = np.stack(points)
        affine = [i for i, fn in enumerate(sat_fns) if isinstance(fn, AffineSat)]
        self.affine_idx = np.array(affine, dtype=int)
        if affine:
            self.affine_A = np.stack([sat_fns[i].terms[0].a for i in affine])
            self.affine_c = np.array([sat_fns[i].terms[0].c for i in affine])
        self.other = [(i, fn) for i, fn in enumerate(sat_fns) if not isinstance(fn, AffineSat)]

    def _values_from(self, Y: np.ndarray) -> np.ndarray:
        values = np.empty(self.size)
        if self.affine_idx.size:
            values[self.affine_idx] = (
                np.einsum("ij,ij->i", Y[self.affine_idx], self.affine_A) + self.affine_c
            )
        for i, fn in self.other:
            values[i] = fn.value(Y[i])
        return values

    def values(self, model: Model) -> np.ndarray:
        if not self.size:
            return np.zeros(0)
        return self._values_from(model.forward_many(self.X))

    def values_and_penalty_gradient(self, model: Model, c: float):
        """(constraint values, gradient of sum_k max(0, c - f_k) in theta)."""
        if not self.size:
            return np.zeros(0), np.zeros(model.num_params)
        Y = model.forward_many(self.X)
        values = self._values_from(Y)
        violated = values < c
        if not np.any(violated):
            return values, np.zeros(model.num_params)
        upstream = np.zeros_like(Y)
        aff_violated = self.affine_idx[violated[self.affine_idx]] if self.affine_idx.size else []
        if len(aff_violated):
            rows = np.searchsorted(self.affine_idx, aff_violated)
            upstream[aff_violated] = -self.affine_A[rows]
        for i, fn in self.other:
            if violated[i]:
                upstream[i] = -fn.gradient(Y[i])
        dtheta, _ = model.grad_many(self.X, upstream)
        return values, dtheta


def remove_penalty(problem: RemovalProblem, hyper: PenaltyConfig | None = None) -> RemovalReport:
    """Minimize J plus an L1 violation penalty by adaptive first-order descent.

    The penalty weight starts at ``init_weight`` and doubles whenever the
    inner minimization converges with some constraint still below the
    satisfaction constant.  Success is declared from the best iterate seen
    with every constraint at or above the constant (so a success report is
    self-validating); with no counterexamples this is plain local descent
    on J from the incoming parameters.
    """
    hyper = hyper or PenaltyConfig()
    c = problem.satisfaction_constant
    batch = _ConstraintBatch(problem.counterexamples)
    model = problem.model
    theta = model.param_vector().copy()
    unconstrained = batch.size == 0

    def feasible(values) -> bool:
        return values.size == 0 or bool(np.min(values) >= c)

    best_feasible_theta = None
    best_feasible_obj = np.inf
    if feasible(batch.values(model)):
        best_feasible_theta = theta.copy()
        best_feasible_obj = problem.objective.value(model)

    weight = hyper.init_weight
    success_weight = hyper.init_weight if unconstrained else None
    total_iters = 0
    scale = 1.0 if hyper.param_scale is None else np.asarray(hyper.param_scale, dtype=float)

    for _ in range(hyper.max_weight_escalations + 1):
        adam = AdamState(theta.size, lr=hyper.lr)
        current = model.with_params(theta)
        for _ in range(hyper.max_iters):
            if not np.all(np.isfinite(theta)):
                return RemovalReport(
                    params=theta,
                    success=False,
                    iterations=total_iters,
                    final_penalty_weight=weight,
                    objective=float("nan"),
                    detail="non-finite loss",
                )
            values, penalty_grad = batch.values_and_penalty_gradient(current, c)
            if feasible(values):
                obj_value = problem.objective.value(current)
                if obj_value < best_feasible_obj:
                    best_feasible_obj = obj_value
                    best_feasible_theta = theta.copy()
                    success_weight = weight

            grad = problem.objective.param_gradient(current) + weight * penalty_grad
            if not np.all(np.isfinite(grad)):
                return RemovalReport(
                    params=theta,
                    success=False,
                    iterations=total_iters,
                    final_penalty_weight=weight,
                    objective=float("nan"),
                    detail="non-finite loss",
                )
            step = scale * adam.step(grad)
            theta = theta + step
            current = model.with_params(theta)
            total_iters += 1
            if np.max(np.abs(step), initial=0.0) < 1e-10:
                break
        if best_feasible_theta is not None and not unconstrained:
            break  # constraints held at some iterate; no escalation needed
        if unconstrained:
            break
        weight *= hyper.weight_growth

    if best_feasible_theta is None:
        final = model.with_params(theta)
        return RemovalReport(
            params=theta,
            success=False,
            iterations=total_iters,
            final_penalty_weight=weight,
            objective=problem.objective.value(final),
            detail="constraints still violated at the final penalty weight",
        )

    final = model.with_params(best_feasible_theta)
    return RemovalReport(
        params=best_feasible_theta,
        success=True,
        iterations=total_iters,
        final_penalty_weight=success_weight,
        objective=problem.objective.value(final),
    )


def fit_line_least_squares(xs, ts) -> tuple[float, float] | None:
    """Closed-form normal-equations fit of t ~ w x + b; None when singular."""
    xs = np.asarray(xs, dtype=float).ravel()
    ts = np.asarray(ts, dtype=float).ravel()
    mean_x = xs.mean()
    mean_t = ts.mean()
    dx = xs - mean_x
    var = float(dx @ dx)
    scale = max(1.0, float(np.max(np.abs(xs))))
    if var <= 1e-12 * scale**2:
        return None
    w = float(dx @ (ts - mean_t)) / var
    b = mean_t - w * mean_x
    return w, float(b)


def remove_augment_lsq(
    problem: RemovalProblem,
    dataset: tuple[np.ndarray, np.ndarray],
    labeler: Callable[[float], float],
) -> RemovalReport:
    """Append labeled counterexamples to the dataset and refit analytically.

    Every stored counterexample is appended (the store accumulates across
    repair steps, so augmentation grows with it).  Success is evaluated
    post hoc against all stored counterexamples at the satisfaction
    constant.
    """
    if not isinstance(problem.model, LinReg1D):
        raise TypeError("augment-and-refit removal expects a 1-D linear regressor")
    xs, ts = dataset
    xs = list(np.asarray(xs, dtype=float).ravel())
    ts = list(np.asarray(ts, dtype=float).ravel())
    for _, points in problem.counterexamples:
        for x in points:
            value = float(np.atleast_1d(x)[0])
            xs.append(value)
            ts.append(float(labeler(value)))

    fit = fit_line_least_squares(xs, ts)
    if fit is None:
        return RemovalReport(
            params=problem.model.param_vector(),
            success=False,
            objective=problem.objective.value(problem.model),
            detail="singular normal equations",
        )
    new_model = LinReg1D(*fit)
    values = _ConstraintBatch(problem.counterexamples).values(new_model)
    success = values.size == 0 or bool(np.min(values) >= problem.satisfaction_constant)
    return RemovalReport(
        params=new_model.param_vector(),
        success=success,
        iterations=1,
        objective=problem.objective.value(new_model),
        detail="" if success else "refit left constraints violated",
    )


DEFAULT_QP_MARGIN = 1e-2


def _endpoint_constraints(spec: Specification, margin: float, x_map, y_scale, y_shift):
    """Constraint rows over scaled variables (w', b') for every property endpoint."""
    rows = []
    rhs = []
    for prop in spec:
        if not isinstance(prop.input_set, Box) or prop.input_set.dim != 1:
            raise ValueError("exact QP repair needs 1-D interval input sets")
        if not isinstance(prop.sat_fn, AffineSat):
            raise ValueError("exact QP repair needs affine satisfaction functions (split form)")
        a = float(prop.sat_fn.a[0])
        c = float(prop.sat_fn.c)
        for v in (float(prop.input_set.lo[0]), float(prop.input_set.hi[0])):
            xv = x_map(v)
            rows.append([a * y_scale * xv, a * y_scale])
            rhs.append(margin - a * y_shift - c)
    return np.array(rows), np.array(rhs)


def repair_qp_exact(
    model: LinReg1D,
    spec: Specification,
    dataset: tuple[np.ndarray, np.ndarray],
    margin: float = DEFAULT_QP_MARGIN,
) -> RemovalReport:
    """Exact repair of a 1-D linear regressor against a split linear spec.

    Each property contributes one constraint per interval endpoint, the
    dataset MSE is a convex quadratic, and the whole repair problem becomes
    a QP.  Infeasibility means no linear model satisfies the margined
    specification.  The problem is solved in standardized coordinates
    (inputs and targets shifted/scaled) so the KKT residuals stay clean at
    integer-key magnitudes; the returned model is mapped back and verified
    by endpoint evaluation before reporting success.
    """
    if not isinstance(model, LinReg1D):
        raise TypeError("exact QP repair expects a 1-D linear regressor")
    xs, ts = dataset
    xs = np.asarray(xs, dtype=float).ravel()
    ts = np.asarray(ts, dtype=float).ravel()
    if xs.size < 2:
        raise ValueError("exact QP repair needs at least two dataset points")

    endpoints = []
    for prop in spec:
        endpoints.extend([float(prop.input_set.lo[0]), float(prop.input_set.hi[0])])
    all_x = np.concatenate([xs, np.array(endpoints)]) if endpoints else xs
    x_shift = 0.5 * (all_x.min() + all_x.max())
    x_scale = max(0.5 * (all_x.max() - all_x.min()), 1e-9)
    y_shift = float(ts.mean())
    y_scale = max(float(np.max(np.abs(ts - y_shift))), 1.0)

    xn = (xs - x_shift) / x_scale
    tn = (ts - y_shift) / y_scale
    count = xs.size
    Q = (2.0 / count) * np.array(
        [[float(xn @ xn), float(xn.sum())], [float(xn.sum()), float(count)]]
    )
    q = (-2.0 / count) * np.array([float(xn @ tn), float(tn.sum())])

    A, b = _endpoint_constraints(
        spec, margin, lambda v: (v - x_shift) / x_scale, y_scale, y_shift
    )
    w0 = model.w * x_scale / y_scale
    b0 = (model.b + model.w * x_shift - y_shift) / y_scale
    try:
        sol = solve_qp(ConvexQP(Q, q, A, b), tol=1e-10, x0=np.array([w0, b0]))
    except QpIterationError as exc:
        return RemovalReport(
            params=model.param_vector(),
            success=False,
            objective=problem_mse(model, xs, ts),
            detail=f"solver error: {exc}",
        )
    if sol.status != "optimal":
        return RemovalReport(
            params=model.param_vector(),
            success=False,
            iterations=sol.iterations,
            objective=problem_mse(model, xs, ts),
            detail="infeasible",
        )

    w = sol.x[0] * y_scale / x_scale
    bias = sol.x[1] * y_scale + y_shift - sol.x[0] * y_scale * x_shift / x_scale
    repaired = LinReg1D(float(w), float(bias))

    # endpoint verification before reporting success
    for prop in spec:
        for v in (float(prop.input_set.lo[0]), float(prop.input_set.hi[0])):
            if satisfaction(prop, repaired.forward([v])) < 0.0:
                return RemovalReport(
                    params=repaired.param_vector(),
                    success=False,
                    iterations=sol.iterations,
                    objective=problem_mse(repaired, xs, ts),
                    detail="endpoint verification failed",
                )
    return RemovalReport(
        params=repaired.param_vector(),
        success=True,
        iterations=sol.iterations,
        objective=problem_mse(repaired, xs, ts),
    )


def problem_mse(model: LinReg1D, xs, ts) -> float:
    pred = model.w * np.asarray(xs, dtype=float) + model.b
    residual = pred - np.asarray(ts, dtype=float)
    return float(np.mean(residual**2))


# -- remover adapters for the repair loop --------------------------------------

Remover = Callable[[RemovalProblem], RemovalReport]


@dataclass(eq=False)
class PenaltyRemover:
    hyper: PenaltyConfig = field(default_factory=PenaltyConfig)
    name: str = "penalty"

    def __call__(self, problem: RemovalProblem) -> RemovalReport:
        return remove_penalty(problem, self.hyper)


@dataclass(eq=False)
class AugmentLsqRemover:
    dataset: tuple[np.ndarray, np.ndarray]
    labeler: Callable[[float], float]
    name: str = "augment-lsq"

    def __call__(self, problem: RemovalProblem) -> RemovalReport:
        return remove_augment_lsq(problem, self.dataset, self.labeler)


@dataclass(eq=False)
class QpExactRemover:
    """Direct exact repair: ignores the counterexample store and solves the
    fully-margined repair problem (two constraints per property).

    Margins are tried in decreasing order: the robust default first, then
    progressively smaller fallbacks so that repair succeeds whenever any
    feasible repaired model exists at all.
    """

    spec: Specification
    dataset: tuple[np.ndarray, np.ndarray]
    margins: Sequence[float] = (DEFAULT_QP_MARGIN, DEFAULT_SATISFACTION_CONSTANT, 0.0)
    name: str = "qp"

    def __call__(self, problem: RemovalProblem) -> RemovalReport:
        iterations = 0
        last = None
        for margin in self.margins:
            report = repair_qp_exact(problem.model, self.spec, self.dataset, margin)
            iterations += report.iterations
            if report.success:
                report.iterations = iterations
                return report
            last = report
        last.iterations = iterations
        return last
