import numpy as np
import pytest

from ddnnv.data import check_excitation, recover_system
from ddnnv.examples import (
    EXAMPLES,
    PendulumExample,
    fit_example_controller,
    load_example,
    lqr_gain,
    pendulum_data,
)
from ddnnv.reach import verify_safety
from ddnnv.sectors import SectorData
from ddnnv.stability import verify_stability, verify_stability_model


def test_pendulum_constants_and_equilibrium():
    ex = PendulumExample()
    assert (ex.k, ex.g, ex.l, ex.m, ex.dt) == (0.8, 10.0, 1.0, 1.0, 0.02)
    assert np.allclose(ex.rhs(np.array(ex.equilibrium), 0.0), 0.0)
    lin = ex.linearization()
    assert np.allclose(lin.A, [[1.0, 0.02], [-0.3, 0.984]])
    assert np.allclose(lin.B, [[0.0], [0.06]])


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_pendulum_data_deterministic_and_exciting(method):
    a = pendulum_data(0, K=5, method=method)
    b = pendulum_data(0, K=5, method=method)
    assert np.array_equal(a.X1, b.X1) and np.array_equal(a.U0, b.U0)
    assert check_excitation(a).passed


def test_pendulum_data_recovers_jacobian():
    B, A = recover_system(pendulum_data(0, K=5))
    lin = PendulumExample().linearization()
    assert np.abs(A - lin.A).max() <= 5e-3 and np.abs(B - lin.B).max() <= 5e-3


def test_linear_controller_reproduces_gain():
    lin = PendulumExample().linearization()
    net = fit_example_controller(lin, hidden=0)
    K = lqr_gain(lin)
    X = np.random.default_rng(0).uniform(-1, 1, size=(200, 2))
    assert np.abs(net.batch(X) - X @ K.T).max() <= 1e-12


@pytest.mark.parametrize("seed", [0, 1])
def test_fitted_controller_accuracy_and_stability(seed):
    lin = PendulumExample().linearization()
    net = fit_example_controller(lin, 16, seed, half_width=0.05)
    K = lqr_gain(lin)
    X = np.random.default_rng(seed).uniform(-0.05, 0.05, size=(2000, 2))
    assert np.abs(net.batch(X) - X @ K.T).max() <= 1e-3
    sec = SectorData.for_network(net)
    assert verify_stability(net, sec, pendulum_data(seed, K=5)).certified
    assert verify_stability_model(net, sec, lin).certified


def test_fit_tolerance_enforced():
    lin = PendulumExample().linearization()
    with pytest.raises(ValueError):
        fit_example_controller(lin, 2, 0, half_width=50.0, tol=1e-9)


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_examples_build_and_write(name, tmp_path):
    ex = load_example(name)
    assert check_excitation(ex.data).passed
    paths = ex.write(tmp_path)
    assert all((tmp_path / p).exists() for p in ("nn.json", "data.csv", "sets.json", "plant.json"))
    assert set(paths) == {"nn", "data", "sets", "plant"}
    assert ex.input_set.contained_in(ex.safe_set)


def test_unknown_example():
    with pytest.raises(ValueError):
        load_example("cartpole")


def test_vehicle_safe_for_two_steps_only():
    ex = load_example("vehicle")
    res = verify_safety(ex.net, SectorData.for_network(ex.net), ex.data, ex.input_set, ex.safe_set, 3)
    assert res.safe_until == 2 and not res.safe
    # the lateral-error facets grow with k
    e = [g[0] for g in res.gammas]
    assert e[0] < e[1] < e[2]
