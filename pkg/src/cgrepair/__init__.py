"""Counterexample-guided repair workbench.

Searchers (exact vertex/neuron verifiers, branch and bound, a first-order
falsifier), counterexample-removal backends (penalty descent, dataset
augmentation, exact quadratic-programming repair), the generic repair loop
with execution traces, non-termination case studies, and an integer-dataset
learned-index harness.
"""

from .models import (
    Affine,
    Box,
    Fcnn,
    Layer,
    LinReg1D,
    Model,
    SingleNeuron,
    deserialize,
    load_model,
    save_model,
    serialize,
)
from .specs import (
    AffineSat,
    MaxOfAffineSat,
    MinOfAffineSat,
    Property,
    Specification,
    VertexPolytope,
    is_counterexample,
    robustness_property,
    satisfaction,
    split_linear,
)

__all__ = [
    "Affine",
    "AffineSat",
    "Box",
    "Fcnn",
    "Layer",
    "LinReg1D",
    "MaxOfAffineSat",
    "MinOfAffineSat",
    "Model",
    "Property",
    "SingleNeuron",
    "Specification",
    "VertexPolytope",
    "deserialize",
    "is_counterexample",
    "load_model",
    "robustness_property",
    "satisfaction",
    "save_model",
    "serialize",
    "split_linear",
]

__version__ = "0.1.0"
