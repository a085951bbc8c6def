import numpy as np
import pytest

from ddnnv.data import (
    OraclePlant,
    TrajectoryData,
    check_excitation,
    collect,
    numerical_rank,
    recover_system,
    require_excitation,
    solve_consistency,
)
from ddnnv.errors import DimensionError, ExcitationError


def plant(rng, n_x=3, n_u=2):
    return OraclePlant(rng.normal(size=(n_x, n_x)) * 0.5, rng.normal(size=(n_x, n_u)))


def test_too_few_columns_fails(rng):
    p = plant(rng)
    rep = check_excitation(collect(p, 4, [-1, 1], [-1, 1], seed=0))
    assert not rep.passed and rep.rank_stacked <= 4 < rep.required_stacked


def test_unexcited_data_fails():
    p = OraclePlant(np.eye(2), np.ones((2, 1)))
    data = TrajectoryData(np.zeros((1, 5)), np.zeros((2, 5)), np.zeros((2, 5)))
    rep = check_excitation(data)
    assert not rep.passed and rep.rank_stacked == 0
    assert p.n_x == 2


def test_vehicle_shape_five_samples_pass(rng):
    p = OraclePlant(rng.normal(size=(4, 4)) * 0.3, rng.normal(size=(4, 1)))
    assert check_excitation(collect(p, 5, [-1, 1], [-1, 1], seed=3)).passed


def test_collect_null_and_frozen_plants():
    d = collect(OraclePlant(np.zeros((2, 2)), np.zeros((2, 1))), 6, [-1, 1], [-1, 1], seed=1)
    assert not d.X1.any()
    d = collect(OraclePlant(np.eye(2), np.zeros((2, 1))), 6, [-1, 1], [-1, 1], seed=1)
    assert np.all(d.X1 == d.X0[:, :1])


def test_single_rollout_chaining(rng):
    d = collect(plant(rng), 10, [-1, 1], [-1, 1], seed=2)
    assert np.array_equal(d.X1[:, :-1], d.X0[:, 1:])


def test_collect_deterministic(rng):
    p = plant(rng)
    a = collect(p, 7, [-1, 1], [-2, 2], seed=5)
    b = collect(p, 7, [-1, 1], [-2, 2], seed=5)
    assert np.array_equal(a.U0, b.U0) and np.array_equal(a.X0, b.X0) and np.array_equal(a.X1, b.X1)


def test_collect_rejects_empty_box(rng):
    with pytest.raises(ValueError):
        collect(plant(rng), 3, [1, -1], [-1, 1])
    with pytest.raises(ValueError):
        collect(plant(rng), 0, [-1, 1], [-1, 1])


def test_recover_system(rng):
    p = plant(rng)
    B, A = recover_system(collect(p, 12, [-1, 1], [-1, 1], seed=0, independent=True))
    assert np.linalg.norm(A - p.A) + np.linalg.norm(B - p.B) <= 1e-8


def test_recover_square_case_exact(rng):
    p = plant(rng)
    d = collect(p, 5, [-1, 1], [-1, 1], seed=0, independent=True)
    B, A = recover_system(d)
    assert np.abs(d.X1 - np.hstack([B, A]) @ d.stacked).max() <= 1e-10


def test_recover_rank_deficient_raises(rng):
    with pytest.raises(ExcitationError) as info:
        recover_system(collect(plant(rng), 3, [-1, 1], [-1, 1]))
    assert info.value.report is not None and not info.value.report.passed


def test_solve_consistency_identities(rng):
    p = plant(rng)
    d = collect(p, 9, [-1, 1], [-1, 1], seed=4, independent=True)
    B, A = recover_system(d)
    G1 = solve_consistency(d, np.zeros((2, 3)), np.eye(3))
    assert np.abs(d.X1 @ G1 - A).max() <= 1e-8
    W = rng.normal(size=(2, 5))
    G2 = solve_consistency(d, W, np.zeros((3, 5)))
    assert np.abs(d.X1 @ G2 - B @ W).max() <= 1e-8
    assert solve_consistency(d, np.zeros((2, 0)), np.zeros((3, 0))).shape == (9, 0)
    # minimum norm: orthogonal to the null space of [U0; X0]
    N = np.linalg.svd(d.stacked)[2][5:].T
    assert np.abs(N.T @ G1).max() <= 1e-10


def test_consistency_identity_random_rhs(rng):
    p = plant(rng)
    d = collect(p, 8, [-1, 1], [-1, 1], seed=6, independent=True)
    B, A = recover_system(d)
    for _ in range(5):
        T, S = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
        G = solve_consistency(d, T, S)
        assert np.abs(d.X1 @ G - (B @ T + A @ S)).max() <= 1e-8


def test_rank_monotone_when_appending(rng):
    p = plant(rng)
    d = collect(p, 3, [-1, 1], [-1, 1], seed=1)
    prev = check_excitation(d)
    for s in range(4):
        d = d.append(collect(p, 1, [-1, 1], [-1, 1], seed=10 + s))
        rep = check_excitation(d)
        assert rep.rank_stacked >= prev.rank_stacked and rep.rank_x1 >= prev.rank_x1
        prev = rep


def test_numerical_rank_threshold():
    M = np.diag([1.0, 1e-9, 0.0])
    assert numerical_rank(M)[0] == 1
    assert numerical_rank(M, rtol=1e-10)[0] == 2
    assert numerical_rank(np.zeros((0, 3)))[0] == 0


def test_csv_round_trip(tmp_path, rng):
    d = collect(plant(rng), 6, [-1, 1], [-1, 1], seed=1)
    path = tmp_path / "d.csv"
    d.save_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# provenance: ")
    assert lines[1] == "u_0,u_1,x_0,x_1,x_2,x1_0,x1_1,x1_2"
    e = TrajectoryData.load_csv(path)
    assert e.provenance["seed"] == 1 and e.provenance["source"] == str(path)
    assert np.array_equal(e.U0, d.U0) and np.array_equal(e.X0, d.X0) and np.array_equal(e.X1, d.X1)


def test_bad_csv_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("u_0,x_0,x_1,x1_0\n1,2,3,4\n")
    with pytest.raises(DimensionError):
        TrajectoryData.load_csv(path)


def test_column_scaling_preserves_identities(rng):
    p = plant(rng)
    d = collect(p, 8, [-1, 1], [-1, 1], seed=2, independent=True)
    s = d.column_scaling()
    ds = d.scaled(s)
    assert np.allclose(np.linalg.norm(ds.stacked, axis=0), 1.0)
    B, A = recover_system(ds)
    assert np.allclose(A, p.A, atol=1e-8) and np.allclose(B, p.B, atol=1e-8)


def test_require_excitation_message(rng):
    with pytest.raises(ExcitationError, match="at least n_u \\+ n_x = 5"):
        require_excitation(collect(plant(rng), 4, [-1, 1], [-1, 1]))


def test_noise_flag_round_trips_and_blocks_certification(tmp_path):
    from ddnnv.nn import NeuralNetwork
    from ddnnv.reach import Polytope, verify_invariance
    from ddnnv.sectors import SectorData
    from ddnnv.stability import verify_stability

    plant = OraclePlant(0.5 * np.eye(2), np.array([[0.0], [1.0]]))
    noisy = collect(plant, 8, [-1, 1], [-1, 1], seed=0, independent=True, noise_std=1e-6)
    clean = collect(plant, 8, [-1, 1], [-1, 1], seed=0, independent=True)
    assert noisy.noisy and not clean.noisy
    assert 0 < np.abs(noisy.X1 - clean.X1).max() < 1e-4
    noisy.save_csv(tmp_path / "d.csv")
    back = TrajectoryData.load_csv(tmp_path / "d.csv")
    assert back.noisy and np.array_equal(back.X1, noisy.X1)

    net = NeuralNetwork((np.zeros((2, 2)), np.zeros((1, 2))), (np.zeros(2), np.zeros(1)), "tanh")
    sec = SectorData.for_network(net)
    cert = verify_stability(net, sec, back)
    assert not cert.certified and cert.verdict == "exploratory-feasible"
    assert verify_stability(net, sec, clean).verdict == "certified"
    inv = verify_invariance(net, sec, back, Polytope.box([-1, -1], [1, 1]))
    assert not inv.invariant and inv.verdict == "exploratory-feasible"
    with pytest.raises(ValueError):
        collect(plant, 8, [-1, 1], [-1, 1], noise_std=-1.0)
