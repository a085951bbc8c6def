import json

import numpy as np
import pytest

from conftest import random_net
from ddnnv.errors import DimensionError, SectorError
from ddnnv.nn import activate
from ddnnv.sectors import SectorData, default_sector, sector_form, sector_quadratic_matrix


def test_default_sectors():
    assert default_sector("relu") == (0.0, 1.0, 0.0, 0.0)
    assert default_sector("tanh") == (0.0, 1.0, 0.0, 0.0)
    a, b, vs, ws = default_sector("sigmoid")
    assert (a, b, vs, ws) == (0.0, 0.25, 0.0, 0.5)
    assert default_sector("leaky_relu", 0.1)[:2] == (0.1, 1.0)
    with pytest.raises(ValueError):
        default_sector("softplus")


def test_zero_multiplier_gives_zero_matrix():
    sec = SectorData(np.zeros(2), np.ones(2), np.zeros(2), np.zeros(2))
    assert not sector_quadratic_matrix(sec, np.zeros(2)).any()


def test_relu_hand_value():
    sec = SectorData(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1))
    M = sector_quadratic_matrix(sec, np.ones(1))
    assert np.array_equal(M, [[0.0, 1.0], [1.0, -2.0]])
    z = np.array([2.0, 2.0])
    assert z @ M @ z == 0.0


def test_negative_multiplier_rejected():
    sec = SectorData(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        sector_quadratic_matrix(sec, -np.ones(1))


def test_matrix_is_linear_in_lambda(rng):
    sec = SectorData(np.zeros(3), np.ones(3), np.zeros(3), np.zeros(3))
    l1, l2 = rng.uniform(size=3), rng.uniform(size=3)
    M = sector_quadratic_matrix
    assert np.allclose(M(sec, l1 + l2), M(sec, l1) + M(sec, l2))


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid", "leaky_relu"])
def test_quadratic_form_equals_product_form(rng, act):
    a, b, vs, ws = default_sector(act, 0.05)
    n = 4
    sec = SectorData(np.full(n, a), np.full(n, b), np.full(n, vs), np.full(n, ws))
    lam = rng.uniform(size=n)
    v = rng.normal(scale=3, size=n)
    w = activate(act, v, 0.05)
    d = np.concatenate([v - vs, w - ws])
    quad = d @ sector_quadratic_matrix(sec, lam) @ d
    assert np.isclose(quad, sector_form(sec, lam, v, w), rtol=1e-12, atol=1e-12)


def test_relu_tight_on_boundary(rng):
    sec = SectorData(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1))
    v = rng.normal(size=(1000, 1)) * 5
    w = np.maximum(v, 0)
    lam = rng.uniform(0, 10, size=1)
    assert np.abs(sector_form(sec, lam, v, w)).max() == 0.0


def test_overrides_and_validation(tmp_path, rng):
    net = random_net(rng, 2, 1, (3,), "sigmoid")
    path = tmp_path / "sec.json"
    path.write_text(json.dumps({"alpha": [0, 0, 0], "beta": [0.3, 0.3, 0.3], "v_star": [1, 1, 1]}))
    sec = SectorData.load(net, path)
    assert np.allclose(sec.w_star, 1 / (1 + np.exp(-1.0)))
    assert sec.validate(net) <= 1e-12
    bad = SectorData(sec.alpha, sec.beta, sec.v_star, sec.w_star + 1e-6)
    with pytest.raises(SectorError):
        bad.validate(net)
    with pytest.raises(DimensionError):
        SectorData.for_network(net, {"alpha": [0.0]})
