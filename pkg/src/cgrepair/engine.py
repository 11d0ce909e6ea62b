"""The counterexample-guided repair loop.

Alternates counterexample search and counterexample removal until the
specification verifies:

1. solve the unconstrained problem once (local descent on J from the
   incoming parameters),
2. sweep all properties through the searcher cascade (falsifiers first;
   the terminal entry must be complete),
3. if everything verified at the termination threshold, stop with status
   ``repaired``; otherwise add every counterexample found in the sweep to
   its property's store and invoke the remover on the enlarged problem.

Repair steps are counted as verification sweeps, so a run that verifies
immediately took one repair step.  The constraint store only grows; every
counterexample is re-validated concretely before it is ingested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import Model
from .removal import Objective, RemovalProblem, RemovalReport, Remover
from .search import COUNTEREXAMPLE, Searcher, UNKNOWN, VERIFIED
from .specs import (
    DEFAULT_SATISFACTION_CONSTANT,
    Property,
    Specification,
    is_counterexample,
    satisfaction,
)

REPAIRED = "repaired"
REMOVAL_FAILED = "removal_failed"
STEP_LIMIT = "step_limit"
TIMEOUT = "timeout"


@dataclass(eq=False)
class RobustProblem:
    """Concrete repair instance: minimize J subject to the specification."""

    model: Model
    objective: Objective
    specification: Specification


@dataclass(eq=False)
class CgrConfig:
    searcher_cascade: Sequence[Searcher]
    remover: Remover
    max_repair_steps: int = 0  # 0 = unlimited verification sweeps
    time_budget: float | None = None
    termination_threshold: float = 0.0
    satisfaction_constant: float = DEFAULT_SATISFACTION_CONSTANT
    record_params: bool = False

    def __post_init__(self):
        cascade = list(self.searcher_cascade)
        if not cascade:
            raise ValueError("searcher cascade must be nonempty")
        if not cascade[-1].complete:
            raise ValueError("the final cascade entry must be a complete searcher")
        self.searcher_cascade = cascade


@dataclass(eq=False)
class FoundCounterexample:
    property_name: str
    x: np.ndarray
    value: float
    searcher: str


@dataclass(eq=False)
class StepRecord:
    index: int
    counterexamples: list[FoundCounterexample]
    removal: RemovalReport
    params: np.ndarray | None = None
    search_seconds: float = 0.0
    removal_seconds: float = 0.0


@dataclass(eq=False)
class RepairTrace:
    status: str
    records: list[StepRecord]
    cr0: RemovalReport
    final_params: np.ndarray
    sweeps: int
    config: CgrConfig
    wall_seconds: float = 0.0

    @property
    def repair_steps(self) -> int:
        return self.sweeps

    def last_removal(self) -> RemovalReport:
        return self.records[-1].removal if self.records else self.cr0


class SearchAborted(Exception):
    """Terminal searcher could not decide a property (budget exhausted)."""


def _sweep(model, spec, cascade, threshold):
    """One verification sweep over all properties.

    Returns the list of found counterexamples (one per violated property).
    """
    found = []
    for prop in spec:
        decided = False
        for searcher in cascade:
            result = searcher(model, prop)
            if result.status == COUNTEREXAMPLE:
                if not is_counterexample(model, prop, result.x, threshold=0.0):
                    raise RuntimeError(
                        f"searcher {searcher.name!r} returned a spurious counterexample "
                        f"for property {prop.name!r}"
                    )
                found.append(
                    FoundCounterexample(prop.name, result.x, result.value, searcher.name)
                )
                decided = True
                break
            if result.status == VERIFIED and searcher.complete:
                satisfied = threshold == 0.0 or result.lower_bound >= threshold
                if not satisfied:
                    # exact searchers carry the argmin as a witness; at a
                    # positive threshold that witness is the counterexample
                    if result.witness is None:
                        raise SearchAborted(
                            f"searcher {searcher.name!r} cannot witness threshold "
                            f"{threshold} on property {prop.name!r}"
                        )
                    value = satisfaction(prop, model.forward(result.witness))
                    found.append(
                        FoundCounterexample(prop.name, result.witness, value, searcher.name)
                    )
                decided = True
                break
            if result.status == UNKNOWN and searcher.complete:
                raise SearchAborted(
                    f"terminal searcher {searcher.name!r} exhausted its budget "
                    f"on property {prop.name!r}"
                )
            # incomplete searcher came up empty: fall through to the next one
        if not decided and cascade:
            raise SearchAborted(f"no cascade entry decided property {prop.name!r}")
    return found


def run_cgr(problem: RobustProblem, cfg: CgrConfig) -> tuple[Model, RepairTrace]:
    """Run the repair loop; never raises on solver failure (statuses instead)."""
    start = time.perf_counter()
    store: dict[str, list[np.ndarray]] = {p.name: [] for p in problem.specification}
    props: dict[str, Property] = {p.name: p for p in problem.specification}

    def removal_problem(model):
        groups = [(props[name], list(xs)) for name, xs in store.items()]
        return RemovalProblem(
            model=model,
            objective=problem.objective,
            counterexamples=groups,
            satisfaction_constant=cfg.satisfaction_constant,
        )

    def out_of_time():
        return cfg.time_budget is not None and time.perf_counter() - start > cfg.time_budget

    def finish(status, model, records, cr0, sweeps):
        return model, RepairTrace(
            status=status,
            records=records,
            cr0=cr0,
            final_params=model.param_vector(),
            sweeps=sweeps,
            config=cfg,
            wall_seconds=time.perf_counter() - start,
        )

    model = problem.model
    cr0 = cfg.remover(removal_problem(model))
    model = model.with_params(cr0.params)
    records: list[StepRecord] = []
    if not cr0.success:
        return finish(REMOVAL_FAILED, model, records, cr0, sweeps=0)

    sweeps = 0
    while True:
        if out_of_time():
            return finish(TIMEOUT, model, records, cr0, sweeps)
        sweeps += 1
        search_start = time.perf_counter()
        try:
            found = _sweep(model, problem.specification, cfg.searcher_cascade, cfg.termination_threshold)
        except SearchAborted:
            return finish(TIMEOUT, model, records, cr0, sweeps)
        search_seconds = time.perf_counter() - search_start

        if not found:
            return finish(REPAIRED, model, records, cr0, sweeps)
        if cfg.max_repair_steps and sweeps >= cfg.max_repair_steps:
            return finish(STEP_LIMIT, model, records, cr0, sweeps)
        if out_of_time():
            return finish(TIMEOUT, model, records, cr0, sweeps)

        for cex in found:
            store[cex.property_name].append(np.asarray(cex.x, dtype=float))

        removal_start = time.perf_counter()
        report = cfg.remover(removal_problem(model))
        removal_seconds = time.perf_counter() - removal_start
        model = model.with_params(report.params)
        records.append(
            StepRecord(
                index=len(records) + 1,
                counterexamples=found,
                removal=report,
                params=model.param_vector() if cfg.record_params else None,
                search_seconds=search_seconds,
                removal_seconds=removal_seconds,
            )
        )
        if not report.success:
            return finish(REMOVAL_FAILED, model, records, cr0, sweeps)


@dataclass(eq=False)
class OptimalityReport:
    passed: bool
    verified: bool
    objective_gap: float
    final_objective: float
    reported_objective: float


def check_optimality_on_termination(
    trace: RepairTrace, problem: RobustProblem, tol: float = 1e-8
) -> OptimalityReport:
    """Validate the terminating iterate of a repaired trace.

    Checks (a) that the final model verifies against every property via the
    terminal searcher and (b) that its objective value matches the last
    removal report within ``tol`` — i.e. the returned model really is the
    minimizer the final removal produced, which certifies it as a minimizer
    of the whole repair problem.
    """
    if trace.status != REPAIRED:
        raise ValueError("optimality check applies to repaired traces only")
    model = problem.model.with_params(trace.final_params)
    verifier = trace.config.searcher_cascade[-1]
    verified = all(verifier(model, prop).status == VERIFIED for prop in problem.specification)
    final_objective = problem.objective.value(model)
    reported = trace.last_removal().objective
    gap = abs(final_objective - reported)
    return OptimalityReport(
        passed=verified and gap <= tol,
        verified=verified,
        objective_gap=gap,
        final_objective=final_objective,
        reported_objective=reported,
    )
