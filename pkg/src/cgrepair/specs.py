"""Properties, specifications, and satisfaction functions.

A property pairs an input set with a satisfaction function; the sign
convention is ``value(y) >= 0`` exactly when the output ``y`` is admissible.
Output sets are never materialized as geometry: everything downstream
consumes the satisfaction function.

Two thresholds appear throughout the workbench and are kept explicit:
verification decides satisfaction against 0, counterexample removal targets
a small positive satisfaction constant (default 1e-4) so repaired
constraints hold robustly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np

from .models import Box, Model, _readonly
from .qp import ConvexQP, solve_qp

DEFAULT_SATISFACTION_CONSTANT = 1e-4


@dataclass(frozen=True, eq=False)
class AffineTerm:
    """One affine output constraint a . y + c."""

    a: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "a", _readonly(np.atleast_1d(self.a)))
        object.__setattr__(self, "c", float(self.c))

    def value(self, y: np.ndarray) -> float:
        return float(self.a @ y + self.c)

    def lower_bound(self, box: Box) -> float:
        ap = np.clip(self.a, 0.0, None)
        an = np.clip(self.a, None, 0.0)
        return float(ap @ box.lo + an @ box.hi + self.c)


class SatisfactionFn:
    """Base satisfaction function; subclasses fix how terms combine."""

    terms: tuple[AffineTerm, ...]

    @property
    def output_dim(self) -> int:
        return self.terms[0].a.size

    def value(self, y) -> float:
        raise NotImplementedError

    def gradient(self, y) -> np.ndarray:
        """Subgradient with respect to y (first active term on ties)."""
        raise NotImplementedError

    def lower_bound(self, box: Box) -> float:
        """Sound lower bound of the function over an output box."""
        raise NotImplementedError

    def _values(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (self.output_dim,):
            raise ValueError(
                f"output dimension mismatch: expected {self.output_dim}, got {y.shape}"
            )
        return np.array([t.value(y) for t in self.terms])

    def _term_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        A = np.stack([t.a for t in self.terms])
        c = np.array([t.c for t in self.terms])
        return A, c

    def _batch_term_values(self, Y: np.ndarray) -> np.ndarray:
        A, c = self._term_matrix()
        return Y @ A.T + c  # (batch, terms)

    def values_many(self, Y: np.ndarray) -> np.ndarray:
        """Vectorized evaluation over the rows of Y."""
        raise NotImplementedError

    def gradients_many(self, Y: np.ndarray) -> np.ndarray:
        """Subgradient rows with respect to each output row of Y."""
        raise NotImplementedError


def _check_terms(terms) -> tuple[AffineTerm, ...]:
    terms = tuple(terms)
    if not terms:
        raise ValueError("satisfaction function needs at least one term")
    dim = terms[0].a.size
    if any(t.a.size != dim for t in terms):
        raise ValueError("satisfaction terms must share the output dimension")
    return terms


@dataclass(frozen=True, eq=False)
class AffineSat(SatisfactionFn):
    """f(y) = a . y + c."""

    a: np.ndarray
    c: float

    def __post_init__(self):
        term = AffineTerm(self.a, self.c)
        object.__setattr__(self, "a", term.a)
        object.__setattr__(self, "c", term.c)
        object.__setattr__(self, "terms", (term,))

    def value(self, y) -> float:
        return float(self._values(y)[0])

    def gradient(self, y) -> np.ndarray:
        return self.terms[0].a.copy()

    def lower_bound(self, box: Box) -> float:
        return self.terms[0].lower_bound(box)

    def values_many(self, Y: np.ndarray) -> np.ndarray:
        return Y @ self.terms[0].a + self.terms[0].c

    def gradients_many(self, Y: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.terms[0].a, (Y.shape[0], self.output_dim)).copy()


@dataclass(frozen=True, eq=False)
class MinOfAffineSat(SatisfactionFn):
    """Conjunction: f(y) = min_i (a_i . y + c_i)."""

    terms: tuple[AffineTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", _check_terms(self.terms))

    def value(self, y) -> float:
        return float(self._values(y).min())

    def gradient(self, y) -> np.ndarray:
        vals = self._values(y)
        return self.terms[int(np.argmin(vals))].a.copy()

    def lower_bound(self, box: Box) -> float:
        return min(t.lower_bound(box) for t in self.terms)

    def values_many(self, Y: np.ndarray) -> np.ndarray:
        return self._batch_term_values(Y).min(axis=1)

    def gradients_many(self, Y: np.ndarray) -> np.ndarray:
        A, _ = self._term_matrix()
        active = np.argmin(self._batch_term_values(Y), axis=1)
        return A[active]


@dataclass(frozen=True, eq=False)
class MaxOfAffineSat(SatisfactionFn):
    """Disjunction: f(y) = max_i (a_i . y + c_i)."""

    terms: tuple[AffineTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", _check_terms(self.terms))

    def value(self, y) -> float:
        return float(self._values(y).max())

    def gradient(self, y) -> np.ndarray:
        vals = self._values(y)
        return self.terms[int(np.argmax(vals))].a.copy()

    def lower_bound(self, box: Box) -> float:
        # max_i f_i(y) >= f_i(y) >= lb_i for every i, so the largest term
        # lower bound is a sound bound for the disjunction.
        return max(t.lower_bound(box) for t in self.terms)

    def values_many(self, Y: np.ndarray) -> np.ndarray:
        return self._batch_term_values(Y).max(axis=1)

    def gradients_many(self, Y: np.ndarray) -> np.ndarray:
        A, _ = self._term_matrix()
        active = np.argmax(self._batch_term_values(Y), axis=1)
        return A[active]


@dataclass(frozen=True, eq=False)
class VertexPolytope:
    """Convex polytope in vertex representation."""

    vertices: np.ndarray  # (k, n)

    def __post_init__(self):
        v = _readonly(np.atleast_2d(self.vertices))
        if v.ndim != 2 or v.shape[0] == 0:
            raise ValueError("polytope needs at least one vertex")
        object.__setattr__(self, "vertices", v)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def contains(self, x, tol: float = 1e-9) -> bool:
        """Membership via the least-squares convex-combination QP."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dim,):
            return False
        V = self.vertices
        k = V.shape[0]
        scale = 1.0 + float(np.max(np.abs(V)))
        Q = 2.0 * (V @ V.T) / scale**2
        q = -2.0 * (V @ x) / scale**2
        ones = np.ones((1, k))
        A = np.vstack([np.eye(k), ones, -ones])
        b = np.concatenate([np.zeros(k), [1.0], [-1.0]])
        sol = solve_qp(ConvexQP(Q, q, A, b), tol=1e-10, x0=np.full(k, 1.0 / k))
        if sol.status != "optimal":
            return False
        residual = np.max(np.abs(V.T @ sol.x - x))
        return bool(residual <= tol * scale)


InputSet = Union[Box, VertexPolytope]


@dataclass(frozen=True, eq=False)
class Property:
    """Named input set plus satisfaction function."""

    name: str
    input_set: InputSet
    sat_fn: SatisfactionFn

    @property
    def input_dim(self) -> int:
        return self.input_set.dim


@dataclass(frozen=True, eq=False)
class Specification:
    properties: tuple[Property, ...]

    def __post_init__(self):
        props = tuple(self.properties)
        names = [p.name for p in props]
        if len(set(names)) != len(names):
            raise ValueError("property names must be unique")
        object.__setattr__(self, "properties", props)

    def __iter__(self):
        return iter(self.properties)

    def __len__(self):
        return len(self.properties)


def satisfaction(prop: Property, y) -> float:
    return prop.sat_fn.value(y)


def is_counterexample(model: Model, prop: Property, x, threshold: float = 0.0) -> bool:
    """True iff x lies in the property input set and violates it by more
    than the threshold (strictly below)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(prop.input_set, Box):
        if not prop.input_set.contains(x):
            return False
    else:
        if not prop.input_set.contains(x):
            return False
    return satisfaction(prop, model.forward(x)) < threshold


def split_linear(prop: Property) -> list[Property]:
    """Split a conjunction into one affine property per term.

    The conjunction of the returned properties holds exactly when the input
    property does.  Disjunctions cannot be split this way.
    """
    if isinstance(prop.sat_fn, MaxOfAffineSat):
        raise ValueError("cannot split a disjunction into affine properties")
    if not isinstance(prop.sat_fn, MinOfAffineSat):
        raise ValueError("split_linear expects a min-of-affine satisfaction function")
    return [
        Property(f"{prop.name}#{i}", prop.input_set, AffineSat(t.a, t.c))
        for i, t in enumerate(prop.sat_fn.terms)
    ]


def robustness_property(
    x,
    label: int,
    epsilon: float,
    num_classes: int,
    domain: Box | None = None,
    name: str | None = None,
) -> Property:
    """L-infinity robustness around x for the given label.

    The satisfaction function is the smallest score margin
    ``min_{i != label} (y_label - y_i)``; ties count as satisfied.  The
    vacuous self-margin term is omitted so that satisfied outputs carry a
    strictly positive value, which removal needs to target a positive
    satisfaction constant.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not (0 <= label < num_classes):
        raise ValueError("label must be a valid class index")
    lo = x - epsilon
    hi = x + epsilon
    if domain is not None:
        lo = np.maximum(lo, domain.lo)
        hi = np.minimum(hi, domain.hi)
    terms = []
    for i in range(num_classes):
        if i == label:
            continue
        a = np.zeros(num_classes)
        a[label] = 1.0
        a[i] = -1.0
        terms.append(AffineTerm(a, 0.0))
    return Property(
        name or f"robust-{label}",
        Box(lo, hi),
        MinOfAffineSat(tuple(terms)),
    )


# -- serialization -------------------------------------------------------------

_SAT_TYPES = {AffineSat: "affine", MinOfAffineSat: "min_affine", MaxOfAffineSat: "max_affine"}


def _sat_to_dict(fn: SatisfactionFn) -> dict:
    kind = _SAT_TYPES.get(type(fn))
    if kind is None:
        raise ValueError(f"cannot serialize satisfaction function {type(fn).__name__}")
    return {
        "type": kind,
        "terms": [{"a": t.a.tolist(), "c": t.c} for t in fn.terms],
    }


def _sat_from_dict(doc: dict) -> SatisfactionFn:
    try:
        kind = doc["type"]
        terms = tuple(AffineTerm(entry["a"], entry["c"]) for entry in doc["terms"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed satisfaction function: {exc}") from exc
    if kind == "affine":
        if len(terms) != 1:
            raise ValueError("affine satisfaction function must have one term")
        return AffineSat(terms[0].a, terms[0].c)
    if kind == "min_affine":
        return MinOfAffineSat(terms)
    if kind == "max_affine":
        return MaxOfAffineSat(terms)
    raise ValueError(f"unknown satisfaction function type {kind!r}")


def spec_to_dict(spec: Specification) -> dict:
    props = []
    for prop in spec:
        if isinstance(prop.input_set, Box):
            input_doc = {"box": {"lo": prop.input_set.lo.tolist(), "hi": prop.input_set.hi.tolist()}}
        else:
            input_doc = {"vertices": prop.input_set.vertices.tolist()}
        props.append({"name": prop.name, "input": input_doc, "sat": _sat_to_dict(prop.sat_fn)})
    return {"properties": props}


def spec_from_dict(doc: dict) -> Specification:
    try:
        raw = doc["properties"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed specification document: {exc}") from exc
    props = []
    for entry in raw:
        try:
            name = entry["name"]
            input_doc = entry["input"]
            sat = _sat_from_dict(entry["sat"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed property entry: {exc}") from exc
        if "box" in input_doc:
            input_set: InputSet = Box(input_doc["box"]["lo"], input_doc["box"]["hi"])
        elif "vertices" in input_doc:
            input_set = VertexPolytope(input_doc["vertices"])
        else:
            raise ValueError("property input must be a box or a vertex list")
        props.append(Property(name, input_set, sat))
    return Specification(tuple(props))


def spec_serialize(spec: Specification) -> str:
    return json.dumps(spec_to_dict(spec), indent=2)


def spec_deserialize(text: str) -> Specification:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed specification document: {exc}") from exc
    return spec_from_dict(doc)


def save_spec(spec: Specification, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_serialize(spec))
        fh.write("\n")


def load_spec(path) -> Specification:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_deserialize(fh.read())
