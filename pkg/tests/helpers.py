"""Shared test utilities: random instance generators and finite-difference oracles."""

import numpy as np

from cgrepair.models import Affine, Box, Fcnn, Layer, LinReg1D, SingleNeuron


def random_layer(rng, in_dim, out_dim, activation, scale=1.0):
    w = rng.normal(scale=scale / np.sqrt(in_dim), size=(out_dim, in_dim))
    b = rng.normal(scale=0.3, size=out_dim)
    return Layer(w, b, activation)


def random_fcnn(rng, dims, activations=None, scale=1.0):
    """Random network with the given layer widths; last layer linear by default."""
    if activations is None:
        activations = ["relu"] * (len(dims) - 2) + ["none"]
    layers = [
        random_layer(rng, dims[i], dims[i + 1], activations[i], scale)
        for i in range(len(dims) - 1)
    ]
    return Fcnn(tuple(layers))


def random_affine(rng, in_dim, out_dim):
    return Affine(rng.normal(size=(out_dim, in_dim)), rng.normal(size=out_dim))


def random_neuron(rng, n, activation=None):
    act = activation or rng.choice(["relu", "sigmoid"])
    return SingleNeuron(rng.normal(size=n), float(rng.normal()), act)


def random_linreg(rng):
    return LinReg1D(float(rng.normal()), float(rng.normal()))


def random_box(rng, n, lo=-1.0, hi=1.0):
    a = rng.uniform(lo, hi, size=n)
    b = rng.uniform(lo, hi, size=n)
    return Box(np.minimum(a, b), np.maximum(a, b) + 0.1)


def sample_in_box(rng, box, count):
    return rng.uniform(box.lo, box.hi, size=(count, box.dim))


def fd_param_gradient(model, x, upstream, step=1e-5):
    """Central finite differences of upstream . N(x) with respect to theta."""
    theta = model.param_vector()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += step
        minus = theta.copy()
        minus[i] -= step
        fp = float(np.dot(upstream, model.with_params(plus).forward(x)))
        fm = float(np.dot(upstream, model.with_params(minus).forward(x)))
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def fd_input_gradient(model, x, upstream, step=1e-5):
    """Central finite differences of upstream . N(x) with respect to x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        plus = x.copy()
        plus[i] += step
        minus = x.copy()
        minus[i] -= step
        fp = float(np.dot(upstream, model.forward(plus)))
        fm = float(np.dot(upstream, model.forward(minus)))
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def pre_activations(model, x):
    """All pre-activation values encountered while evaluating the model."""
    values = []
    z = np.atleast_1d(np.asarray(x, dtype=float))
    for layer in model.layers:
        s = layer.weights @ z + layer.bias
        values.extend(s.tolist())
        if layer.activation == "relu":
            z = np.maximum(s, 0.0)
        elif layer.activation == "sigmoid":
            z = 1.0 / (1.0 + np.exp(-s))
        else:
            z = s
    return np.array(values)


def away_from_kinks(model, x, margin=1e-3):
    return bool(np.all(np.abs(pre_activations(model, x)) > margin))
