"""Dense convex quadratic programming.

Solves  minimize 0.5 x'Qx + q'x  subject to  Ax >= b  with a primal
active-set method.  Phase 1 decides feasibility by minimizing the largest
constraint violation (a linear program on a slack-augmented problem, run
through the same active-set loop); phase 2 iterates equality-constrained
KKT solves, adding the blocking constraint with the largest violation at
the trial point and dropping the most negative multiplier.  A Bland-style
lowest-index rule guards against cycling after ``3 m`` iterations.

The method is meant for small dense problems (n <= 50).  The constraint
count m is unbounded: each iteration touches one constraint, so the loop
doubles as a cutting-plane scheme when m is large.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DAMPING = 1e-12


@dataclass(frozen=True, eq=False)
class ConvexQP:
    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        n = q.size
        A = np.asarray(self.A, dtype=float).reshape(-1, n)
        b = np.atleast_1d(np.asarray(self.b, dtype=float)) if np.size(self.b) else np.zeros(0)
        if Q.shape != (n, n):
            raise ValueError("Q must be n x n")
        if not np.allclose(Q, Q.T, atol=1e-10):
            raise ValueError("Q must be symmetric")
        if n and np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite (up to round-off)")
        if A.shape[0] != b.size:
            raise ValueError("A rows must match b length")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def num_vars(self) -> int:
        return self.q.size

    @property
    def num_constraints(self) -> int:
        return self.b.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.q @ x)


@dataclass(eq=False)
class QpSolution:
    status: str  # "optimal" | "infeasible"
    x: np.ndarray
    multipliers: np.ndarray
    active: tuple[int, ...]
    iterations: int = 0
    objective: float = float("nan")
    # phase-2 objective value after every active-set step, for descent checks
    objective_history: list = field(default_factory=list)


class QpIterationError(RuntimeError):
    """Raised when the active-set loop hits its iteration cap."""


def _solve_kkt(Q, g, A_work):
    """Step and multipliers for the equality-constrained subproblem.

    The Hessian block is always Tikhonov-damped so the system stays solvable
    for semidefinite (and zero) Q; the damping is negligible against any
    genuine curvature.
    """
    n = g.size
    k = A_work.shape[0]
    damped = Q + _DAMPING * np.eye(n)
    if k == 0:
        try:
            p = np.linalg.solve(damped, -g)
            if not np.all(np.isfinite(p)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            p = np.linalg.lstsq(damped, -g, rcond=None)[0]
        return p, np.zeros(0)
    M = np.block([[damped, -A_work.T], [A_work, np.zeros((k, k))]])
    rhs = np.concatenate([-g, np.zeros(k)])
    try:
        sol = np.linalg.solve(M, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set(Q, q, A, b, x, tol, track_history=False):
    """Primal active-set loop from a feasible ``x``.

    Returns (x, multipliers, working set, iterations, history).
    """
    n = q.size
    m = b.size
    work: list[int] = []
    history = []
    bland_after = 3 * max(m, 1)
    max_iter = bland_after + max(200, 20 * n)
    step_tol = 1e-11

    def objective(v):
        return float(0.5 * v @ Q @ v + q @ v)

    if track_history:
        history.append(objective(x))

    for it in range(1, max_iter + 1):
        bland = it > bland_after
        g = Q @ x + q
        A_work = A[work] if work else np.zeros((0, n))
        p, mu = _solve_kkt(Q, g, A_work)

        # A step is "zero" when it is tiny or when it cannot usefully
        # decrease the objective (guards against null-space drift when the
        # damped Hessian is effectively singular, e.g. in the phase-1 LP).
        decrease = -float(g @ p)
        stationary = (
            np.max(np.abs(p), initial=0.0)
            <= step_tol * (1.0 + np.max(np.abs(x), initial=0.0))
            or decrease <= 1e-13 * (1.0 + abs(objective(x)) + abs(float(q @ x)))
        )
        if stationary:
            if not work or mu.min() >= -tol:
                lam = np.zeros(m)
                for idx, w in enumerate(work):
                    lam[w] = max(mu[idx], 0.0)
                return x, lam, tuple(work), it, history
            if bland:
                pos = min(i for i, v in enumerate(mu) if v < -tol)
            else:
                pos = int(np.argmin(mu))
            work.pop(pos)
            continue

        in_work = np.zeros(m, dtype=bool)
        if work:
            in_work[work] = True
        Ap = A @ p if m else np.zeros(0)
        residual = A @ x - b if m else np.zeros(0)
        # per-row noise floor for "moves toward the constraint"
        row_scale = np.abs(A) @ np.abs(p) if m else np.zeros(0)
        blocking = (~in_work) & (Ap < -1e-13 * (1.0 + row_scale))
        alpha = 1.0
        block_idx = -1
        if np.any(blocking):
            idxs = np.flatnonzero(blocking)
            ratios = np.maximum(residual[idxs], 0.0) / (-Ap[idxs])
            best = ratios.min()
            if best < 1.0:
                alpha = best
                # relative tie tolerance: steps can be huge (phase-1 LP), so
                # the ratios themselves may all be tiny
                candidates = idxs[ratios <= best * (1.0 + 1e-9) + 1e-300]
                if bland:
                    block_idx = int(candidates.min())
                else:
                    # among ties, add the constraint most violated at x + p
                    target_violation = (A[candidates] @ (x + p)) - b[candidates]
                    block_idx = int(candidates[np.argmin(target_violation)])

        x = x + alpha * p
        if track_history:
            history.append(objective(x))
        if block_idx >= 0:
            work.append(block_idx)

    raise QpIterationError(f"active-set iteration cap exceeded after {max_iter} iterations")


def _phase1(A, b, x0, tol):
    """Feasibility LP: minimize the single slack t with A x + t >= b, t >= 0."""
    m, n = A.shape
    worst = float(np.max(b - A @ x0, initial=0.0))
    t0 = max(worst, 0.0) + 1.0
    z0 = np.concatenate([x0, [t0]])
    A_aug = np.hstack([A, np.ones((m, 1))])
    t_row = np.zeros((1, n + 1))
    t_row[0, n] = 1.0
    A_lp = np.vstack([A_aug, t_row])
    b_lp = np.concatenate([b, [0.0]])
    Q_lp = np.zeros((n + 1, n + 1))
    q_lp = np.zeros(n + 1)
    q_lp[n] = 1.0
    z, _, _, its, _ = _active_set(Q_lp, q_lp, A_lp, b_lp, z0, tol)
    return z[:n], float(z[n]), its


def solve_qp(qp: ConvexQP, tol: float = 1e-9, x0=None) -> QpSolution:
    """Solve the QP; ``status`` is "optimal" or "infeasible".

    Raises :class:`QpIterationError` when the active-set loop cannot settle
    within its iteration cap; a wrong "optimal" is never returned (the KKT
    conditions are re-checked before reporting).
    """
    n = qp.num_vars
    m = qp.num_constraints
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError("x0 dimension mismatch")

    iterations = 0
    if m:
        violation = float(np.max(qp.b - qp.A @ x, initial=0.0))
        if violation > tol:
            x, worst, its = _phase1(qp.A, qp.b, x, tol)
            iterations += its
            if worst > tol:
                return QpSolution(
                    status="infeasible",
                    x=x,
                    multipliers=np.zeros(m),
                    active=(),
                    iterations=iterations,
                    objective=float("nan"),
                )

    x, lam, active, its, history = _active_set(qp.Q, qp.q, qp.A, qp.b, x, tol, track_history=True)
    iterations += its

    solution = QpSolution(
        status="optimal",
        x=x,
        multipliers=lam,
        active=active,
        iterations=iterations,
        objective=qp.objective(x),
        objective_history=history,
    )
    # Guard: never report an optimal point that fails an independent KKT check.
    if not check_kkt(qp, solution, max(tol, 1e-8)):
        raise QpIterationError("active-set loop terminated without KKT satisfaction")
    return solution


def kkt_residuals(qp: ConvexQP, solution: QpSolution) -> dict:
    x = solution.x
    lam = solution.multipliers
    stationarity = qp.Q @ x + qp.q
    if qp.num_constraints:
        stationarity = stationarity - qp.A.T @ lam
        slack = qp.A @ x - qp.b
        primal = float(slack.min())
        complementarity = float(np.max(np.abs(lam * slack)))
        dual = float(lam.min())
    else:
        primal = 0.0
        complementarity = 0.0
        dual = 0.0
    return {
        "stationarity": float(np.max(np.abs(stationarity), initial=0.0)),
        "primal": primal,
        "complementarity": complementarity,
        "dual": dual,
    }


def check_kkt(qp: ConvexQP, solution: QpSolution, tol: float) -> bool:
    """Independent recomputation of the KKT residuals."""
    if solution.status != "optimal":
        raise ValueError("check_kkt requires an optimal solution")
    res = kkt_residuals(qp, solution)
    return (
        res["stationarity"] <= tol
        and res["primal"] >= -tol
        and res["complementarity"] <= tol
        and res["dual"] >= -tol
    )
