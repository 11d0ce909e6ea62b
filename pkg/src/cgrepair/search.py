"""Counterexample searchers.

Four families:

* ``verify_vertex_enum`` — exact verification by vertex enumeration, for
  constraints that are affine in the input over a box or vertex polytope.
* ``verify_single_neuron`` — exact closed-form verification of a single
  monotone neuron against an affine output constraint.
* ``verify_bab`` — best-first branch and bound with interval bounds and
  input splitting; complete up to a tolerance, with optimal and early-exit
  modes.
* ``falsify_bim`` — projected first-order search with adaptive step
  scaling and random restarts; sound but incomplete (it can never verify).

Every returned counterexample is genuine: it lies in the property input
set and its recorded violation is the concrete satisfaction value at that
point.  With ``parallelism=1`` and a fixed seed all searchers are
deterministic; branch-and-bound expands nodes sequentially, so its
optimal-mode result does not depend on the worker count.
"""

from __future__ import annotations

import heapq
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .models import Box, Model, SingleNeuron
from .optim import AdamState
from .specs import AffineSat, Property, VertexPolytope, is_counterexample, satisfaction

VERTEX_CAP = 1 << 20

VERIFIED = "verified"
COUNTEREXAMPLE = "counterexample"
UNKNOWN = "unknown"


@dataclass
class SearchStats:
    nodes_explored: int = 0
    evaluations: int = 0
    wall_time: float = field(default=0.0, compare=False)
    best_bound: float | None = None


@dataclass(eq=False)
class SearchResult:
    status: str
    x: np.ndarray | None = None
    value: float | None = None
    lower_bound: float | None = None
    witness: np.ndarray | None = None  # argmin point backing a verified verdict
    stats: SearchStats = field(default_factory=SearchStats)

    @staticmethod
    def verified(lower_bound, stats, witness=None) -> "SearchResult":
        return SearchResult(VERIFIED, lower_bound=float(lower_bound), witness=witness, stats=stats)

    @staticmethod
    def counterexample(x, value, stats) -> "SearchResult":
        return SearchResult(COUNTEREXAMPLE, x=np.asarray(x, dtype=float), value=float(value), stats=stats)

    @staticmethod
    def unknown(stats) -> "SearchResult":
        return SearchResult(UNKNOWN, stats=stats)

    @property
    def is_verified(self) -> bool:
        return self.status == VERIFIED

    @property
    def is_counterexample(self) -> bool:
        return self.status == COUNTEREXAMPLE


@dataclass
class SearchConfig:
    mode: str = "optimal"  # "optimal" | "early_exit"
    tolerance: float = 1e-6
    early_exit_threshold: float = 1e-9
    max_nodes: int = 200_000
    time_budget: float | None = None
    rng_seed: int = 0
    restarts: int = 10
    parallelism: int = 1
    falsifier_iters: int = 200
    falsifier_step: float = 0.1

    def __post_init__(self):
        if self.mode not in ("optimal", "early_exit"):
            raise ValueError("mode must be 'optimal' or 'early_exit'")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


def _box_vertices(box: Box):
    """Vertices in lexicographic order (low endpoint first per dimension)."""
    return itertools.product(*[(lo, hi) for lo, hi in zip(box.lo, box.hi)])


def _input_vertices(input_set) -> tuple[list[np.ndarray], bool]:
    """(vertex list, already_lexicographic)"""
    if isinstance(input_set, Box):
        if 2 ** input_set.dim > VERTEX_CAP:
            raise ValueError(f"vertex enumeration cap exceeded for a {input_set.dim}-D box")
        return [np.array(v, dtype=float) for v in _box_vertices(input_set)], True
    if isinstance(input_set, VertexPolytope):
        if input_set.vertices.shape[0] > VERTEX_CAP:
            raise ValueError("vertex enumeration cap exceeded")
        return [v.copy() for v in input_set.vertices], False
    raise TypeError(f"unsupported input set {type(input_set).__name__}")


def verify_vertex_enum(model: Model, prop: Property, cfg: SearchConfig) -> SearchResult:
    """Exact verification by evaluating every vertex of the input set.

    Valid when the satisfaction function composed with the model is affine
    in the input (the caller asserts this).  Optimal mode returns the exact
    minimum; ties break to the lexicographically smallest vertex.  Early-exit
    mode returns the first violating vertex in lexicographic order.
    """
    start = time.perf_counter()
    vertices, ordered = _input_vertices(prop.input_set)
    if not ordered:
        vertices.sort(key=tuple)
    stats = SearchStats()

    best_value = np.inf
    best_vertex = None
    for v in vertices:
        value = satisfaction(prop, model.forward(v))
        stats.evaluations += 1
        if cfg.mode == "early_exit" and value < 0.0:
            stats.wall_time = time.perf_counter() - start
            return SearchResult.counterexample(v, value, stats)
        if value < best_value:
            best_value = value
            best_vertex = v

    stats.wall_time = time.perf_counter() - start
    stats.best_bound = best_value
    if best_value < 0.0:
        return SearchResult.counterexample(best_vertex, best_value, stats)
    return SearchResult.verified(best_value, stats, witness=best_vertex)


def verify_single_neuron(model: SingleNeuron, prop: Property, cfg: SearchConfig) -> SearchResult:
    """Closed-form exact verification of a monotone neuron.

    With an affine scalar constraint a*y + c and a monotone increasing
    activation, the constraint is minimized by driving the pre-activation
    down (a >= 0) or up (a < 0); the minimizer is a box vertex selected by
    the weight signs.
    """
    start = time.perf_counter()
    if not isinstance(model, SingleNeuron):
        raise TypeError("verify_single_neuron expects a SingleNeuron model")
    if model.activation not in ("relu", "sigmoid"):
        raise ValueError("activation must be monotone (relu or sigmoid)")
    if not isinstance(prop.sat_fn, AffineSat):
        raise ValueError("single-neuron verification needs an affine satisfaction function")
    if not isinstance(prop.input_set, Box):
        raise TypeError("single-neuron verification needs a box input set")

    box = prop.input_set
    a = float(prop.sat_fn.a[0])
    if a >= 0:
        x = np.where(model.w >= 0, box.lo, box.hi)
    else:
        x = np.where(model.w > 0, box.hi, box.lo)
    value = satisfaction(prop, model.forward(x))
    stats = SearchStats(evaluations=1, wall_time=time.perf_counter() - start, best_bound=value)
    if value < 0.0:
        return SearchResult.counterexample(x, value, stats)
    return SearchResult.verified(value, stats, witness=x)


def monotone_vertex_descent(g: Callable[[np.ndarray], float], box: Box, start) -> np.ndarray:
    """Walk an element-wise monotone function down to a box vertex.

    Per dimension, in index order, the coordinate is fixed to whichever
    endpoint gives the smaller value with the already-fixed coordinates
    held (ties go to the low endpoint).  The result never exceeds
    ``g(start)``.
    """
    x = np.array(start, dtype=float)
    if not box.contains(x):
        raise ValueError("start point must lie inside the box")
    for i in range(box.dim):
        at_lo = x.copy()
        at_lo[i] = box.lo[i]
        at_hi = x.copy()
        at_hi[i] = box.hi[i]
        x = at_lo if g(at_lo) <= g(at_hi) else at_hi
    return x


def _sat_lower_bound(model: Model, prop: Property, box: Box) -> float:
    return prop.sat_fn.lower_bound(model.interval_forward(box))


def verify_bab(model: Model, prop: Property, cfg: SearchConfig) -> SearchResult:
    """Best-first branch and bound over input boxes.

    Node lower bounds come from interval propagation through the network;
    incumbents are concrete evaluations at box centers; branching splits
    the widest input dimension at its midpoint.

    Optimal mode runs until the global lower bound reaches
    ``min(0, incumbent) - tolerance`` and returns either a verified verdict
    or the best incumbent (within tolerance of the true minimum).
    Early-exit mode returns the first incumbent below
    ``-early_exit_threshold``.  Exhausting the node or time budget yields
    ``unknown`` with the best known bound in the stats.
    """
    start = time.perf_counter()
    if not isinstance(prop.input_set, Box):
        raise TypeError("branch and bound needs a box input set")

    stats = SearchStats()
    root = prop.input_set
    counter = itertools.count()  # deterministic heap tie-break
    root_lb = _sat_lower_bound(model, prop, root)
    heap = [(root_lb, next(counter), root)]

    best_value = np.inf
    best_point = None
    global_lb = root_lb

    def out_of_budget() -> bool:
        if stats.nodes_explored >= cfg.max_nodes:
            return True
        if cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget:
            return True
        return False

    while heap:
        lb, _, box = heapq.heappop(heap)
        global_lb = lb
        if lb >= min(0.0, best_value) - cfg.tolerance:
            break  # bound proves nothing better remains
        if out_of_budget():
            stats.wall_time = time.perf_counter() - start
            stats.best_bound = lb
            return SearchResult.unknown(stats)

        stats.nodes_explored += 1
        center = box.center
        value = satisfaction(prop, model.forward(center))
        stats.evaluations += 1
        if value < best_value:
            best_value = value
            best_point = center
        if cfg.mode == "early_exit" and value < -cfg.early_exit_threshold:
            stats.wall_time = time.perf_counter() - start
            stats.best_bound = lb
            return SearchResult.counterexample(center, value, stats)

        widest = int(np.argmax(box.widths))
        if box.widths[widest] <= 0.0:
            continue  # degenerate box, nothing left to split
        for child in box.split(widest):
            child_lb = _sat_lower_bound(model, prop, child)
            # children that cannot beat the incumbent (or prove violation)
            # only ever tighten the bound to min(0, best), so dropping them
            # keeps the final certificate valid
            if child_lb >= min(0.0, best_value):
                continue
            heapq.heappush(heap, (child_lb, next(counter), child))

    if not heap:
        global_lb = min(0.0, best_value)
    stats.wall_time = time.perf_counter() - start
    stats.best_bound = global_lb
    if best_value < 0.0:
        return SearchResult.counterexample(best_point, best_value, stats)
    # reaching here via the bound check guarantees global_lb >= -tolerance
    return SearchResult.verified(global_lb, stats, witness=best_point)


def _restart_rng(seed: int, restart: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, restart)))


def falsify_bim(model: Model, prop: Property, cfg: SearchConfig) -> SearchResult:
    """Projected first-order counterexample search (never verifies).

    Minimizes the satisfaction value over the box with adaptive
    per-coordinate step scaling, projecting onto the box after every step,
    restarting from ``cfg.restarts`` uniform random points.  Returns the
    best point found if it violates the property, otherwise unknown.
    """
    start = time.perf_counter()
    if not isinstance(prop.input_set, Box):
        raise TypeError("the falsifier needs a box input set")
    box = prop.input_set
    stats = SearchStats()

    step_scale = cfg.falsifier_step * box.widths
    best_value = np.inf
    best_point = None

    for restart in range(cfg.restarts):
        rng = _restart_rng(cfg.rng_seed, restart)
        x = rng.uniform(box.lo, box.hi)
        adam = AdamState(box.dim, lr=1.0)
        for _ in range(cfg.falsifier_iters):
            y = model.forward(x)
            value = satisfaction(prop, y)
            stats.evaluations += 1
            if value < best_value:
                best_value = value
                best_point = x.copy()
            _, dx = model.grad(x, prop.sat_fn.gradient(y))
            x = box.clamp(x + step_scale * adam.step(dx))
        value = satisfaction(prop, model.forward(x))
        stats.evaluations += 1
        if value < best_value:
            best_value = value
            best_point = x.copy()

    stats.wall_time = time.perf_counter() - start
    stats.best_bound = best_value
    if best_value < 0.0:
        return SearchResult.counterexample(best_point, best_value, stats)
    return SearchResult.unknown(stats)


@dataclass(eq=False)
class Searcher:
    """Named searcher with a completeness flag (the repair loop requires a
    complete searcher at the end of its cascade)."""

    name: str
    fn: Callable[[Model, Property], SearchResult]
    complete: bool

    def __call__(self, model: Model, prop: Property) -> SearchResult:
        return self.fn(model, prop)


def vertex_searcher(cfg: SearchConfig) -> Searcher:
    return Searcher("vertex", lambda m, p: verify_vertex_enum(m, p, cfg), complete=True)


def neuron_searcher(cfg: SearchConfig) -> Searcher:
    return Searcher("neuron", lambda m, p: verify_single_neuron(m, p, cfg), complete=True)


def bab_searcher(cfg: SearchConfig, mode: str | None = None) -> Searcher:
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    return Searcher(f"bab:{cfg.mode}", lambda m, p: verify_bab(m, p, cfg), complete=True)


def bim_searcher(cfg: SearchConfig) -> Searcher:
    return Searcher("bim", lambda m, p: falsify_bim(m, p, cfg), complete=False)


class ScriptedSearcher:
    """Adversarial searcher replaying a fixed sequence of candidate points.

    Call ``N`` returns the ``N``-th scripted point if it is a genuine
    counterexample of the current model (checked concretely); otherwise the
    call delegates to the fallback searcher.  The instance is stateful and
    meant for a single repair run.
    """

    def __init__(self, sequence: Sequence, fallback: Searcher):
        self.sequence = [np.atleast_1d(np.asarray(x, dtype=float)) for x in sequence]
        self.fallback = fallback
        self.calls = 0

    def __call__(self, model: Model, prop: Property) -> SearchResult:
        index = self.calls
        self.calls += 1
        if index < len(self.sequence):
            x = self.sequence[index]
            if is_counterexample(model, prop, x, threshold=0.0):
                value = satisfaction(prop, model.forward(x))
                return SearchResult.counterexample(x, value, SearchStats(evaluations=1))
        return self.fallback(model, prop)


def scripted_searcher(sequence: Sequence, fallback: Searcher) -> Searcher:
    scripted = ScriptedSearcher(sequence, fallback)
    return Searcher(f"script+{fallback.name}", scripted, complete=fallback.complete)


def make_searcher(selector: str, cfg: SearchConfig) -> Searcher:
    """Map a CLI selection string to a searcher."""
    if selector == "vertex":
        return vertex_searcher(cfg)
    if selector == "neuron":
        return neuron_searcher(cfg)
    if selector == "bab:optimal":
        return bab_searcher(cfg, "optimal")
    if selector == "bab:early":
        return bab_searcher(cfg, "early_exit")
    if selector == "bim":
        return bim_searcher(cfg)
    if selector.startswith("script:"):
        path = selector.split(":", 1)[1]
        with open(path, "r", encoding="utf-8") as fh:
            points = json.load(fh)
        return scripted_searcher(points, vertex_searcher(cfg))
    raise ValueError(f"unknown searcher {selector!r}")
