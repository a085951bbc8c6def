import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddnnv.errors import CompilationError, DimensionError
from ddnnv.poly import (
    Polynomial,
    compile_sos,
    gram_polynomial,
    monomial_basis,
    sos_polynomial,
    verify_sos_certificate,
)
from ddnnv.sdp import ConicProgram, solve


def x_(n=1, i=0):
    return Polynomial.variable(n, i)


def test_difference_of_squares():
    x = x_()
    p = (x + 1) * (x - 1)
    assert p.allclose(x ** 2 - 1)
    assert p.terms == {(2,): 1.0, (0,): -1.0}


def test_affine_substitution():
    x = x_()
    p = (x ** 2).substitute_affine([[2.0]], [1.0])
    assert p.allclose(Polynomial(1, {(2,): 4.0, (1,): 4.0, (0,): 1.0}))


def test_substitution_dimension_error():
    with pytest.raises(DimensionError):
        (x_(2) ** 2).substitute_affine(np.ones((3, 1)))
    with pytest.raises(DimensionError):
        x_(2) + x_(3)


def random_poly(rng, n, deg, terms=8):
    out = Polynomial(n)
    for _ in range(terms):
        exp = [0] * n
        for _ in range(rng.integers(0, deg + 1)):
            exp[rng.integers(n)] += 1
        out = out + Polynomial(n, {tuple(exp): float(rng.normal())})
    return out


def test_product_evaluates_pointwise(rng):
    for _ in range(5):
        p, q = random_poly(rng, 3, 3), random_poly(rng, 3, 3)
        pts = rng.normal(size=(100, 3))
        lhs, rhs = (p * q)(pts), p(pts) * q(pts)
        assert np.all(np.abs(lhs - rhs) <= 1e-9 * (1 + np.abs(rhs)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(-3, 3), st.floats(-3, 3))
def test_arithmetic_properties(a, b, x, y):
    p = Polynomial(2, {(0, 0): a[0], (1, 0): a[1], (1, 1): a[2]})
    q = Polynomial(2, {(0, 0): b[0], (0, 1): b[1], (2, 0): b[2]})
    pt = np.array([x, y])
    assert math.isclose((p + q)(pt), p(pt) + q(pt), rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose((p - q)(pt), p(pt) - q(pt), rel_tol=1e-9, abs_tol=1e-9)
    assert (p * q).allclose(q * p, tol=1e-12)
    assert all(c != 0 for c in (p * q).terms.values())


def test_monomial_basis_examples():
    assert monomial_basis(1, 1) == [(0,), (1,)]
    assert monomial_basis(2, 1) == [(0, 0), (1, 0), (0, 1)]
    assert len(monomial_basis(3, 2)) == math.comb(5, 2)
    assert monomial_basis(3, 1, variables=[2]) == [(0, 0, 0), (0, 0, 1)]
    with pytest.raises(ValueError):
        monomial_basis(2, -1)


@given(st.integers(1, 4), st.integers(0, 3))
def test_monomial_basis_count(n, d):
    b = monomial_basis(n, d)
    assert len(b) == math.comb(n + d, d) == len(set(b))
    degs = [sum(e) for e in b]
    assert degs == sorted(degs)


def _solve_sos(p, basis=None):
    prog = ConicProgram("t")
    c = compile_sos(p, basis, prog)
    prog.minimize(0.0)
    return c, solve(prog)


def test_perfect_square_feasible():
    c, sol = _solve_sos(x_() ** 2, [(0,), (1,)])
    assert sol.status == "optimal"
    Q = c.gram_value(sol.y)
    assert np.allclose(Q, [[0, 0], [0, 1]], atol=1e-6)
    assert verify_sos_certificate(c, sol.y).accepted


def test_negative_square_infeasible():
    _, sol = _solve_sos(-(x_() ** 2), [(0,), (1,)])
    assert sol.status == "infeasible"


def test_quartic_reconstruction():
    x = x_()
    p = x ** 4 + 2 * x ** 2 + 1
    c, sol = _solve_sos(p, [(0,), (1,), (2,)])
    assert sol.status == "optimal"
    rec = gram_polynomial(c.basis, c.gram_value(sol.y), 1)
    pts = np.linspace(-3, 3, 100)[:, None]
    assert np.abs(rec(pts) - p(pts)).max() <= 1e-7 * (1 + np.abs(p(pts)).max())
    assert rec.allclose(p, tol=1e-9 * 100)


def test_uncovered_monomial_named():
    with pytest.raises(CompilationError, match=r"\(3,\)"):
        compile_sos(x_() ** 3, [(0,), (1,)])


def test_injected_gram_fault_rejected():
    c, sol = _solve_sos(x_() ** 2 + 1, [(0,), (1,)])
    Q = c.gram_value(sol.y)
    w, V = np.linalg.eigh(Q)
    w[0] -= w[0] + 1e-3  # push the smallest eigenvalue to -1e-3
    bad = V @ np.diag(w) @ V.T
    rep = verify_sos_certificate(c, sol.y, gram=bad)
    assert not rep.accepted and rep.min_gram_eig < -1e-4


def test_basis_enlargement_keeps_feasibility(rng):
    x, y = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    p = (x - y) ** 2 + (x + 0.5) ** 2
    _, small = _solve_sos(p)
    _, large = _solve_sos(p, monomial_basis(2, 2))
    assert small.status == large.status == "optimal"


def test_parametric_sos_polynomial():
    prog = ConicProgram("m")
    g, S = sos_polynomial(prog, 2, 2, "g")
    assert S.shape == (3, 3) and g.degree == 2
    g0, s0 = sos_polynomial(prog, 2, 0, "g0")
    assert g0.degree == 0 and s0.shape == (1, 1)
    with pytest.raises(ValueError):
        sos_polynomial(prog, 2, 1, "odd")


def test_sampled_nonnegativity_of_accepted_certificate(rng):
    x, y = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    p = x ** 2 - x * y + y ** 2 + 0.1
    c, sol = _solve_sos(p)
    rep = verify_sos_certificate(c, sol.y, samples=10_000)
    assert rep.accepted and rep.min_sample >= -1e-6
