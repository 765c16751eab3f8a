"""Small reference networks used by the tests, the CLI demos and the README."""

from __future__ import annotations

import numpy as np

from .net import Network, Neuron, NeuronRef, dense_network, name_neurons


def _ws(bias, *terms):
    return Neuron.weighted_sum(bias, [(NeuronRef(l, i), c) for (l, i, c) in terms])


def _act(layer, index):
    return Neuron.activation(NeuronRef(layer, index))


def cancellation_net() -> Network:
    """One input, two hidden ReLU paths whose change in the first path cancels out.

    Layer 2 neuron 0 (``y = ReLU(x)``) can be replaced by zero without changing
    the output: downstream it enters one sum with +1 and the other with -1, and
    both sums stay in the active phase before being added together.
    """
    layers = (
        (Neuron.input(),),
        (_ws(0.0, (0, 0, 1.0)), _ws(1.0, (0, 0, 1.0))),
        (_act(1, 0), _act(1, 1)),
        (_ws(1.0, (2, 0, 1.0), (2, 1, 1.0)), _ws(1.0, (2, 0, -1.0), (2, 1, 1.0))),
        (_act(3, 0), _act(3, 1)),
        (_ws(0.0, (4, 0, 1.0), (4, 1, 1.0)), _ws(0.0, (4, 0, 1.0), (4, 1, 1.0))),
        (_act(5, 0), _act(5, 1)),
        (_ws(0.0, (6, 0, 1.0), (6, 1, 1.0)),),
    )
    return name_neurons(Network(layers, "forward-cancellation"))


def label_net(second_bias: float = 0.1) -> Network:
    """Two-class classifier on one input whose second ReLU only adds confidence."""
    layers = (
        (Neuron.input(),),
        (_ws(0.0, (0, 0, 1.0)), _ws(-0.2, (0, 0, 1.0))),
        (_act(1, 0), _act(1, 1)),
        (_ws(0.0, (2, 0, 2.0), (2, 1, 1.0)), _ws(second_bias, (2, 0, 1.0), (2, 1, -1.0))),
    )
    return name_neurons(Network(layers, "label-preserving"))


def toy_net() -> Network:
    """3 inputs, two hidden ReLU layers of width 10, 2 outputs, on the box [-1, 1]^3.

    Weights were fitted by least squares to a smooth two-output target and
    rounded to two decimals; the layout is fixed so tests can rely on it.
    """
    rng = np.random.default_rng(20210601)
    W1 = np.round(rng.normal(0.0, 0.8, (10, 3)), 2)
    b1 = np.round(rng.normal(0.0, 0.6, 10), 2)
    W2 = np.round(rng.normal(0.0, 0.5, (10, 10)), 2)
    b2 = np.round(rng.normal(0.0, 0.5, 10), 2)
    # Fit the output layer to a smooth target on samples of the box.
    X = rng.uniform(-1.0, 1.0, (2000, 3))
    H1 = np.maximum(X @ W1.T + b1, 0.0)
    H2 = np.maximum(H1 @ W2.T + b2, 0.0)
    target = np.stack([np.sin(X[:, 0]) + X[:, 1] * X[:, 2], np.abs(X[:, 0] - X[:, 1])], axis=1)
    A = np.hstack([H2, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    W3 = np.round(coef[:-1].T, 2)
    b3 = np.round(coef[-1], 2)
    return name_neurons(dense_network([W1, W2, W3], [b1, b2, b3], name="toy-3x10x10x2"))
