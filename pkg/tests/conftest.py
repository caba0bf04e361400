import numpy as np
import pytest

from bnre import TrainConfig, generate_dataset, get_benchmark, train
from bnre.rng import stable_seed


@pytest.fixture(scope="session")
def tractable_benchmark():
    return get_benchmark("tractable1d")


@pytest.fixture(scope="session")
def tractable_test_set(tractable_benchmark):
    return generate_dataset(tractable_benchmark, 500, seed=99, namespace="test")


@pytest.fixture(scope="session")
def tractable_nre_net(tractable_benchmark):
    """Well-trained plain-NRE classifier at budget 2^14 (shared, ~30 s)."""
    dataset = generate_dataset(tractable_benchmark, 2 ** 14, seed=0)
    config = TrainConfig(lam=0.0, epochs=150, seed=stable_seed("fixture", "nre14"))
    net, history = train(tractable_benchmark, dataset, config)
    return net


def random_net(rng, sizes):
    """Fully random small MLP (no zeroed head) for gradient checks."""
    from bnre.nets import ClassifierNet

    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-0.1, 0.1, size=fan_out))
    return ClassifierNet(weights, biases)


def batch_away_from_kinks(net, rng, n_rows, margin=1e-3, max_tries=500):
    """Input batch whose hidden pre-activations all clear the ReLU kink."""
    for _ in range(max_tries):
        x = rng.uniform(-2.0, 2.0, size=(n_rows, net.input_dim))
        h = x
        ok = True
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            z = h @ w.T + b
            if np.min(np.abs(z)) <= margin:
                ok = False
                break
            h = np.maximum(z, 0.0)
        if ok:
            return x
    raise AssertionError("could not sample a batch away from ReLU kinks")
