import os

import numpy as np
import pytest

# solver panics print a Rust backtrace by default; keep the logs readable
os.environ.setdefault("RUST_BACKTRACE", "0")

from ddnnv.nn import NeuralNetwork  # noqa: E402


def random_net(rng, n_x, n_u, hidden, activation="tanh", scale=1.0, out_scale=1.0, bias=False):
    sizes = [n_x] + list(hidden) + [n_u]
    Ws, bs = [], []
    for i in range(len(sizes) - 1):
        s = out_scale if i == len(sizes) - 2 else scale
        Ws.append(s * rng.normal(size=(sizes[i + 1], sizes[i])))
        bs.append(rng.normal(size=sizes[i + 1]) if bias else np.zeros(sizes[i + 1]))
    return NeuralNetwork(tuple(Ws), tuple(bs), activation)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
