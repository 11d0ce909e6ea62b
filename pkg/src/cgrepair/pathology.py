"""Executable termination and non-termination case studies.

Each case fixes a tiny repair problem whose repair-loop behavior is known
in closed form, pins the tie-breaks among non-unique minimizers (the
adversarial choices), and replays the loop while asserting the defining
relations at every step:

* ``run_lemma_a1`` — one ReLU pair with an unbounded input line: iterates
  run away (``theta`` grows by at least one per step) and never reach the
  true minimizer at -1.
* ``run_prop_general`` — the two-parameter product variant; the pinned
  branch reduces to the previous case, while the alternative branch
  (first parameter zeroed) repairs in a single removal.
* ``run_fcnn_example`` — a standard two-layer ReLU network with one free
  bias parameter showing the same divergence on a flat violated surface.
* ``run_early_exit`` — a 1-D offset model over a bounded interval driven
  through the real repair loop: a scripted first-found-counterexample
  searcher stalls forever below the feasible region, while the exact
  endpoint verifier terminates at the true minimizer.

The unbounded-input cases use closed-form searchers and removers (numeric
searchers require bounded boxes); the early-exit case runs the actual
engine end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import CgrConfig, RobustProblem, run_cgr
from .models import Box, Fcnn, Layer, Model, relu
from .removal import AbsParams, RemovalProblem, RemovalReport
from .search import SearchConfig, scripted_searcher, vertex_searcher
from .specs import AffineSat, Property, Specification

CASES = ("lemma_a1", "prop_general", "fcnn_example", "early_exit")


@dataclass(eq=False)
class IterateRow:
    n: int
    theta: tuple[float, ...]
    x: float
    fsat: float


def lemma_a1_model(theta: float) -> Fcnn:
    """ReLU pair ([-theta; theta - x]) as a one-layer network."""
    return Fcnn((Layer([[0.0], [-1.0]], [-theta, theta], "relu"),))


def _lemma_a1_fsat(theta: float, x: float) -> float:
    y = lemma_a1_model(theta).forward([x])
    return float(y[0] + y[1] - 1.0)


def run_lemma_a1(steps: int, theta0: float = 0.0) -> list[IterateRow]:
    """Diverging execution of the one-parameter ReLU pair case.

    Tie-breaks: the most-violating input is any point on the flat region
    ``x >= theta`` (value -1), and the smallest minimizer ``x = theta`` is
    chosen; the removal solves exactly on the ``theta >= 0`` branch, where
    feasibility for all stored points means ``theta >= max_i x_i + 1``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if theta0 < 0:
        raise ValueError("the diverging branch starts from a nonnegative minimizer")
    theta = float(theta0)
    rows = []
    seen = []
    for n in range(1, steps + 1):
        x = theta  # smallest most-violating point on the flat region
        fsat = _lemma_a1_fsat(theta, x)
        assert fsat == -1.0  # flat violated surface
        assert x >= theta
        seen.append(x)
        theta = max(seen) + 1.0
        assert theta >= x + 1.0
        # the step never reaches the true minimizer at -1
        assert theta >= 0.0
        rows.append(IterateRow(n, (theta,), x, fsat))
    return rows


def prop_general_model(theta1: float, theta2: float):
    """Forward map of the two-parameter product network (not a layer net)."""

    def forward(x: float) -> np.ndarray:
        return relu(np.array([theta1 * theta2, theta1 * x + theta2]))

    return forward


def run_prop_general(steps: int) -> list[IterateRow]:
    """Pinned non-terminating branch of the two-parameter case.

    The first parameter stays at -1 (a global minimizer of J, which is
    ReLU of the parameter product and hence zero there); the second
    follows the one-parameter recursion and diverges while J stays zero.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    theta1 = -1.0
    theta2 = 0.0
    rows = []
    seen = []
    for n in range(1, steps + 1):
        # with theta1 = -1 the network reduces to the lemma_a1 case in theta2
        x = theta2
        y = prop_general_model(theta1, theta2)(x)
        fsat = float(y[0] + y[1] - 1.0)
        assert fsat == -1.0
        j_value = float(relu(np.array([theta1 * theta2]))[0])
        assert j_value == 0.0  # remains a global minimizer of J
        seen.append(x)
        theta2 = max(seen) + 1.0
        assert theta2 >= x + 1.0
        rows.append(IterateRow(n, (theta1, theta2), x, fsat))
    return rows


def prop_general_terminating_branch(c: float = 1e-4) -> tuple[float, float, int]:
    """Alternative execution choosing theta1 = 0: terminates in one removal.

    Returns (theta1, theta2, removals).  With the first parameter zeroed the
    constraint value is constant in x, so one removal setting
    ``theta2 = 1 + c`` satisfies every input and the loop stops.
    """
    theta1, theta2 = 0.0, 1.0 + c
    y = prop_general_model(theta1, theta2)(123.456)  # constant in x
    fsat = float(y[0] + y[1] - 1.0)
    assert fsat > 0.0 and abs(fsat - c) < 1e-12  # satisfied with margin ~c
    assert float(relu(np.array([theta1 * theta2]))[0]) == 0.0  # J still minimal
    return theta1, theta2, 1


def fcnn_example_model(theta: float) -> Fcnn:
    """Two-layer ReLU network with one free bias parameter."""
    return Fcnn(
        (
            Layer([[0.0], [1.0]], [theta, 2.0], "relu"),
            Layer([[-1.0, 0.0], [1.0, -1.0]], [2.0, 0.0], "relu"),
        )
    )


def fcnn_example_fsat(theta: float, x: float) -> float:
    y = fcnn_example_model(theta).forward([x])
    return float(y[0] + y[1] - 1.0)


def run_fcnn_example(steps: int, theta0: float = 2.0) -> list[IterateRow]:
    """Diverging execution of the two-layer network case.

    For ``theta >= 2`` the objective (first output at input zero) is zero
    and the constraint surface is flat at -1 for ``x >= theta - 2``; the
    smallest most-violating point is chosen and removal solves exactly on
    that branch (``theta = max_i x_i + 3``).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if theta0 < 2.0:
        raise ValueError("the diverging branch needs theta0 >= 2")
    theta = float(theta0)
    rows = []
    seen = []
    for n in range(1, steps + 1):
        assert float(fcnn_example_model(theta).forward([0.0])[0]) == 0.0  # J minimal
        x = theta - 2.0  # smallest point of the flat violated region
        fsat = fcnn_example_fsat(theta, x)
        assert fsat == -1.0
        seen.append(x)
        theta = max(seen) + 3.0
        assert theta >= x + 3.0
        rows.append(IterateRow(n, (theta,), x, fsat))
    return rows


class OffsetModel(Model):
    """One-parameter model N(x) = theta - x on a scalar input."""

    def __init__(self, theta: float):
        self.theta = float(theta)

    @property
    def layers(self):
        raise NotImplementedError("offset model is not a layer network")

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def output_dim(self) -> int:
        return 1

    def param_layout(self):
        return [("theta", ())]

    @property
    def num_params(self) -> int:
        return 1

    def param_vector(self) -> np.ndarray:
        return np.array([self.theta])

    def with_params(self, theta) -> "OffsetModel":
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return OffsetModel(float(theta[0]))

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        return np.array([self.theta - x[0]])

    def forward_many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.theta - X[:, :1]

    def grad(self, x, upstream):
        upstream = np.atleast_1d(np.asarray(upstream, dtype=float))
        return np.array([upstream[0]]), np.array([-upstream[0]])

    def grad_many(self, X, upstream):
        U = np.atleast_2d(np.asarray(upstream, dtype=float))
        return np.array([float(U.sum())]), -U.copy()

    def interval_forward(self, box: Box) -> Box:
        return Box([self.theta - box.hi[0]], [self.theta - box.lo[0]])


@dataclass(eq=False)
class ExactOffsetRemover:
    """Closed-form removal for the offset model with J = |theta|.

    Without constraints the minimizer is zero; with stored counterexamples
    the binding constraint is the largest one, so
    ``theta = max_i x_i + constant``.
    """

    constant: float = 0.0
    name: str = "exact-offset"

    def __call__(self, problem: RemovalProblem) -> RemovalReport:
        points = [float(np.atleast_1d(x)[0]) for _, xs in problem.counterexamples for x in xs]
        theta = max(points) + self.constant if points else 0.0
        return RemovalReport(
            params=np.array([theta]),
            success=True,
            iterations=1,
            objective=abs(theta),
        )


def early_exit_problem() -> RobustProblem:
    """Minimize |theta| subject to theta - x >= 0 for all x in [0, 1]."""
    prop = Property("line", Box([0.0], [1.0]), AffineSat([1.0], 0.0))
    return RobustProblem(
        model=OffsetModel(0.0),
        objective=AbsParams(),
        specification=Specification((prop,)),
    )


def early_exit_script(steps: int) -> list[list[float]]:
    return [[0.5 - 1.0 / (n + 2.0)] for n in range(1, steps + 1)]


def run_early_exit(steps: int, mode: str = "scripted", constant: float = 1e-4):
    """Drive the repair loop on the bounded 1-D problem.

    ``scripted`` replays an adversarial early-exit searcher whose
    counterexamples creep toward the infeasible limit 1/2, so the loop hits
    its step budget; removal uses no satisfaction margin so the parameter
    iterates coincide with the scripted points exactly.  ``optimal`` uses
    exact endpoint enumeration and terminates at the true minimizer
    (1 plus the removal constant).

    Returns (iterate rows, trace).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    problem = early_exit_problem()
    search_cfg = SearchConfig()
    if mode == "scripted":
        searcher = scripted_searcher(early_exit_script(steps), vertex_searcher(search_cfg))
        remover = ExactOffsetRemover(constant=0.0)
        max_steps = steps + 1
    elif mode == "optimal":
        searcher = vertex_searcher(search_cfg)
        remover = ExactOffsetRemover(constant=constant)
        max_steps = 0
    else:
        raise ValueError("mode must be 'scripted' or 'optimal'")

    cfg = CgrConfig(
        searcher_cascade=[searcher],
        remover=remover,
        max_repair_steps=max_steps,
        record_params=True,
    )
    _, trace = run_cgr(problem, cfg)
    rows = [
        IterateRow(
            record.index,
            tuple(record.params),
            float(np.atleast_1d(record.counterexamples[0].x)[0]),
            record.counterexamples[0].value,
        )
        for record in trace.records
    ]
    return rows, trace


def run_case(case: str, steps: int, mode: str = "scripted"):
    """CLI entry: iterate table for any of the named cases."""
    if case == "lemma_a1":
        return run_lemma_a1(steps)
    if case == "prop_general":
        return run_prop_general(steps)
    if case == "fcnn_example":
        return run_fcnn_example(steps)
    if case == "early_exit":
        rows, _ = run_early_exit(steps, mode=mode)
        return rows
    raise ValueError(f"unknown case {case!r}; choose from {CASES}")
