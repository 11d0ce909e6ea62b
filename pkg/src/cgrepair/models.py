"""Small differentiable model family.

Provides the model variants used throughout the workbench (plain affine maps,
single activated neurons, fully-connected networks, and 1-D linear
regressors) together with

* exact forward evaluation,
* reverse-mode gradients with respect to both parameters and inputs,
* sound interval (box) propagation for branch-and-bound lower bounds,
* lossless JSON serialization.

Models are immutable after construction: every parameter update goes through
``with_params`` and yields a new value, so forward/grad/interval_forward are
safe to call concurrently.

Parameter layout is fixed: layers in forward order, each layer's weight
matrix in row-major order followed by its bias vector.  Traces and
serialized models rely on this ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "none")


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (separate branches per sign)."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_derivative(name: str, z: np.ndarray) -> np.ndarray:
    # ReLU subgradient at the kink is 0.
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


def _readonly(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned hyper-rectangle ``{x : lo <= x <= hi}``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _readonly(np.atleast_1d(self.lo))
        hi = _readonly(np.atleast_1d(self.hi))
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("box bounds must be 1-D vectors of equal length")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != self.lo.shape:
            return False
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def split(self, dim: int) -> tuple["Box", "Box"]:
        mid = 0.5 * (self.lo[dim] + self.hi[dim])
        left_hi = self.hi.copy()
        left_hi[dim] = mid
        right_lo = self.lo.copy()
        right_lo[dim] = mid
        return Box(self.lo, left_hi), Box(right_lo, self.hi)


@dataclass(frozen=True, eq=False)
class Layer:
    """One affine map plus element-wise activation."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        w = _readonly(np.atleast_2d(self.weights))
        b = _readonly(np.atleast_1d(self.bias))
        if w.ndim != 2 or b.ndim != 1:
            raise ValueError("layer weights must be 2-D and bias 1-D")
        if w.shape[0] != b.size:
            raise ValueError(
                f"bias length {b.size} does not match weight rows {w.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def _check_chain(layers: Sequence[Layer]):
    if not layers:
        raise ValueError("model needs at least one layer")
    for prev, nxt in zip(layers, layers[1:]):
        if nxt.in_dim != prev.out_dim:
            raise ValueError(
                f"layer dimension mismatch: {prev.out_dim} -> {nxt.in_dim}"
            )


class Model:
    """Base for layered models; subclasses provide ``layers`` and ``_rebuild``."""

    _layers: tuple[Layer, ...]

    @property
    def layers(self) -> tuple[Layer, ...]:
        return self._layers

    def _rebuild(self, layers: Sequence[Layer]) -> "Model":
        raise NotImplementedError

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    # -- parameter flattening -------------------------------------------------

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        layout = []
        for i, layer in enumerate(self.layers, start=1):
            layout.append((f"W{i}", layer.weights.shape))
            layout.append((f"b{i}", layer.bias.shape))
        return layout

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_layout())

    def param_vector(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def with_params(self, theta) -> "Model":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.num_params:
            raise ValueError(
                f"expected {self.num_params} parameters, got {theta.size}"
            )
        layers = []
        offset = 0
        for layer in self.layers:
            wn = layer.weights.size
            w = theta[offset : offset + wn].reshape(layer.weights.shape)
            offset += wn
            b = theta[offset : offset + layer.bias.size]
            offset += layer.bias.size
            layers.append(Layer(w, b, layer.activation))
        return self._rebuild(layers)

    # -- evaluation -----------------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.input_dim,):
            raise ValueError(
                f"input dimension mismatch: expected {self.input_dim}, got {x.shape}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        z = self._check_input(x)
        for layer in self.layers:
            z = _activate(layer.activation, layer.weights @ z + layer.bias)
        return z

    def forward_many(self, X) -> np.ndarray:
        """Vectorized forward pass over the rows of ``X`` (batch, input_dim)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValueError("input dimension mismatch")
        Z = X
        for layer in self.layers:
            Z = _activate(layer.activation, Z @ layer.weights.T + layer.bias)
        return Z

    def grad(self, x, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Reverse-mode accumulation of ``upstream @ dN/dtheta`` and ``upstream @ dN/dx``."""
        x = self._check_input(x)
        upstream = np.atleast_1d(np.asarray(upstream, dtype=float))
        if upstream.shape != (self.output_dim,):
            raise ValueError("upstream dimension mismatch")

        inputs = []
        pre = []
        z = x
        for layer in self.layers:
            inputs.append(z)
            s = layer.weights @ z + layer.bias
            pre.append(s)
            z = _activate(layer.activation, s)

        delta = upstream
        grads = []
        for layer, a, s in zip(reversed(self.layers), reversed(inputs), reversed(pre)):
            delta = delta * _activation_derivative(layer.activation, s)
            grads.append((np.outer(delta, a), delta))
            delta = layer.weights.T @ delta

        dtheta = np.empty(self.num_params)
        offset = 0
        for layer, (dw, db) in zip(self.layers, reversed(grads)):
            dtheta[offset : offset + dw.size] = dw.ravel()
            offset += dw.size
            dtheta[offset : offset + db.size] = db
            offset += db.size
        return dtheta, delta

    def grad_many(self, X, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Batched gradients: parameter gradient summed over the batch, input
        gradients per sample."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(upstream, dtype=float))
        if X.shape[1] != self.input_dim or U.shape != (X.shape[0], self.output_dim):
            raise ValueError("batch shape mismatch")

        inputs = []
        pre = []
        Z = X
        for layer in self.layers:
            inputs.append(Z)
            S = Z @ layer.weights.T + layer.bias
            pre.append(S)
            Z = _activate(layer.activation, S)

        delta = U
        grads = []
        for layer, A, S in zip(reversed(self.layers), reversed(inputs), reversed(pre)):
            delta = delta * _activation_derivative(layer.activation, S)
            grads.append((delta.T @ A, delta.sum(axis=0)))
            delta = delta @ layer.weights

        dtheta = np.empty(self.num_params)
        offset = 0
        for layer, (dw, db) in zip(self.layers, reversed(grads)):
            dtheta[offset : offset + dw.size] = dw.ravel()
            offset += dw.size
            dtheta[offset : offset + db.size] = db
            offset += db.size
        return dtheta, delta

    def interval_forward(self, box: Box) -> Box:
        """Sound output enclosure of the input box.

        Affine layers use exact interval arithmetic (positive/negative weight
        split); activations are monotone and map endpoints to endpoints.
        """
        if box.dim != self.input_dim:
            raise ValueError("input dimension mismatch")
        lo, hi = box.lo, box.hi
        for layer in self.layers:
            wp = np.clip(layer.weights, 0.0, None)
            wn = np.clip(layer.weights, None, 0.0)
            new_lo = wp @ lo + wn @ hi + layer.bias
            new_hi = wp @ hi + wn @ lo + layer.bias
            lo = _activate(layer.activation, new_lo)
            hi = _activate(layer.activation, new_hi)
        return Box(lo, hi)


@dataclass(frozen=True, eq=False)
class Affine(Model):
    """y = W x + b with no activation."""

    W: np.ndarray
    b: np.ndarray
    _layers: tuple[Layer, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layer = Layer(self.W, self.b, "none")
        object.__setattr__(self, "W", layer.weights)
        object.__setattr__(self, "b", layer.bias)
        object.__setattr__(self, "_layers", (layer,))

    def _rebuild(self, layers):
        (layer,) = layers
        return Affine(layer.weights, layer.bias)


@dataclass(frozen=True, eq=False)
class SingleNeuron(Model):
    """Scalar neuron act(w . x + b) with a monotone activation."""

    w: np.ndarray
    b: float
    activation: str = "relu"
    _layers: tuple[Layer, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.activation not in ("relu", "sigmoid"):
            raise ValueError("single neuron activation must be relu or sigmoid")
        w = _readonly(np.atleast_1d(self.w))
        layer = Layer(w[None, :], [float(self.b)], self.activation)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "_layers", (layer,))

    def _rebuild(self, layers):
        (layer,) = layers
        return SingleNeuron(layer.weights[0], float(layer.bias[0]), self.activation)

    def pre_activation(self, x) -> float:
        return float(self.w @ self._check_input(x) + self.b)


@dataclass(frozen=True, eq=False)
class Fcnn(Model):
    """Fully-connected chain of affine layers with element-wise activations."""

    _layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self._layers)
        _check_chain(layers)
        object.__setattr__(self, "_layers", layers)

    def _rebuild(self, layers):
        return Fcnn(tuple(layers))


def fcnn(layers: Sequence[Layer]) -> Fcnn:
    return Fcnn(tuple(layers))


@dataclass(frozen=True, eq=False)
class LinReg1D(Model):
    """One-dimensional linear regressor y = w x + b."""

    w: float
    b: float
    _layers: tuple[Layer, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layer = Layer([[float(self.w)]], [float(self.b)], "none")
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "_layers", (layer,))

    def _rebuild(self, layers):
        (layer,) = layers
        return LinReg1D(float(layer.weights[0, 0]), float(layer.bias[0]))

    def predict(self, x: float) -> float:
        return self.w * float(x) + self.b


_KIND_BY_CLASS = {Affine: "affine", SingleNeuron: "neuron", Fcnn: "fcnn", LinReg1D: "linreg1d"}


def model_to_dict(model: Model) -> dict:
    kind = _KIND_BY_CLASS.get(type(model))
    if kind is None:
        raise ValueError(f"cannot serialize model of type {type(model).__name__}")
    return {
        "kind": kind,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in model.layers
        ],
    }


def model_from_dict(doc: dict) -> Model:
    try:
        kind = doc["kind"]
        raw_layers = doc["layers"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model document: {exc}") from exc
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ValueError("model document needs a nonempty layer list")

    layers = []
    for entry in raw_layers:
        try:
            layers.append(
                Layer(entry["weights"], entry["bias"], entry.get("activation", "none"))
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed layer entry: {exc}") from exc
    _check_chain(layers)

    if kind == "affine":
        if len(layers) != 1 or layers[0].activation != "none":
            raise ValueError("affine model must be a single activation-free layer")
        return Affine(layers[0].weights, layers[0].bias)
    if kind == "neuron":
        if len(layers) != 1 or layers[0].out_dim != 1:
            raise ValueError("neuron model must be a single scalar-output layer")
        return SingleNeuron(
            layers[0].weights[0], float(layers[0].bias[0]), layers[0].activation
        )
    if kind == "linreg1d":
        if len(layers) != 1 or layers[0].weights.shape != (1, 1):
            raise ValueError("linreg1d model must be a single 1x1 layer")
        if layers[0].activation != "none":
            raise ValueError("linreg1d model cannot have an activation")
        return LinReg1D(float(layers[0].weights[0, 0]), float(layers[0].bias[0]))
    if kind == "fcnn":
        return Fcnn(tuple(layers))
    raise ValueError(f"unknown model kind {kind!r}")


def serialize(model: Model) -> str:
    # json renders floats via repr: shortest decimal string that round-trips.
    return json.dumps(model_to_dict(model), indent=2)


def deserialize(text: str) -> Model:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed model document: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: Model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(model))
        fh.write("\n")


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize(fh.read())
