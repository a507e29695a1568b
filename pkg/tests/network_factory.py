"""Random networks for round-trip and replay tests."""
import numpy as np

from supconv.activations import get_activation
from supconv.constructions import (build_sawtooth, build_staircase, convert_relu_network, fit_points,
                                   monomial_network, product_network, resolver, square_network)
from supconv.network import AffineLayer, Network, compose, linear_combination

ACTIVATIONS = ("gelu", "tanh", "softplus", "silu", "sigmoid", "softsign", "relu", "elu")


def random_dense(rng: np.random.Generator) -> Network:
    act = get_activation(ACTIVATIONS[rng.integers(len(ACTIVATIONS))])
    sizes = [int(rng.integers(1, 4))] + [int(rng.integers(1, 7)) for _ in range(rng.integers(1, 4))] + [1]
    layers = tuple(AffineLayer(rng.standard_normal((b, a)) * 10.0 ** rng.uniform(-3, 3), rng.standard_normal(b))
                   for a, b in zip(sizes[:-1], sizes[1:]))
    skips = tuple(tuple(i for i in range(layer.out_dim) if rng.random() < 0.2) for layer in layers[:-1])
    return Network(layers, act, skips, {"construction": "random", "sizes": sizes})


def random_constructed(rng: np.random.Generator) -> Network:
    """One of the library's constructions with random parameters."""
    kind = int(rng.integers(7))
    act = get_activation(("gelu", "tanh", "softplus", "silu")[rng.integers(4)])
    K = float(10.0 ** rng.uniform(1, 4))
    if kind == 0:
        return square_network(act, K, float(rng.uniform(0.5, 2)))
    if kind == 1:
        return product_network(act, K, float(rng.uniform(0.5, 2)))
    if kind == 2:
        alpha = tuple(int(a) for a in rng.integers(0, 3, size=2))
        alpha = alpha if sum(alpha) else (1, 1)
        return monomial_network(act, alpha, K)
    if kind == 3:
        folds, teeth, J = [(0, 1, 2), (2, 1, 8), (3, 3, 16)][rng.integers(3)]
        return build_sawtooth(folds, teeth, J)
    if kind == 4:
        N, L = [(1, 2), (2, 1), (2, 2)][rng.integers(3)]
        J = N * N * L * L
        return build_staircase(J, 1.0 / (3 * J), N, L)
    if kind == 5:
        N, L, s = (int(v) for v in rng.integers(1, 3, size=3))
        return convert_relu_network(fit_points(rng.random(N * N * L * L), N, L, s), act, 2.0 ** 20, M=2.0)
    mixed = linear_combination([square_network(act, K), random_dense_with(act, rng)], [1.0, -0.5])
    return compose(resolver(act), mixed)


def random_dense_with(act, rng: np.random.Generator) -> Network:
    net = random_dense(rng)
    while net.input_dim != 1:
        net = random_dense(rng)
    return Network(net.layers, act, net.skip_channels, net.provenance)
