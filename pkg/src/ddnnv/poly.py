"""Sparse multivariate polynomials and their sum-of-squares compilation.

Coefficients are either floats or :class:`~ddnnv.sdp.Affine` expressions in
the decision variables of a :class:`~ddnnv.sdp.ConicProgram`, so the same
arithmetic builds numeric polynomials and parametric constraint bodies.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from numbers import Real

import numpy as np

from .errors import CompilationError, DimensionError
from .sdp import Affine, ConicProgram, evaluate

GRAM_EIG_TOL = 1e-7
MATCH_TOL = 1e-6


def _is_zero(c):
    return c.is_zero() if isinstance(c, Affine) else c == 0


def _add_exp(a, b):
    return tuple(i + j for i, j in zip(a, b))


class Polynomial:
    __slots__ = ("n_vars", "terms")

    def __init__(self, n_vars, terms=None):
        self.n_vars = int(n_vars)
        self.terms = {}
        for exp, c in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != self.n_vars:
                raise DimensionError(f"exponent {exp} has wrong length for {self.n_vars} variables")
            if not _is_zero(c):
                self.terms[exp] = c

    # -- constructors ------------------------------------------------------
    @classmethod
    def constant(cls, n_vars, c):
        return cls(n_vars, {(0,) * n_vars: c})

    @classmethod
    def variable(cls, n_vars, i):
        exp = [0] * n_vars
        exp[i] = 1
        return cls(n_vars, {tuple(exp): 1.0})

    @classmethod
    def linear(cls, n_vars, coeffs, const=0.0, indices=None):
        """``sum_k coeffs[k] * x[indices[k]] + const``."""
        indices = range(len(coeffs)) if indices is None else indices
        terms = {(0,) * n_vars: const}
        for i, c in zip(indices, coeffs):
            exp = [0] * n_vars
            exp[i] = 1
            exp = tuple(exp)
            terms[exp] = terms.get(exp, 0.0) + c
        return cls(n_vars, terms)

    # -- queries -----------------------------------------------------------
    @property
    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def variables(self):
        return sorted({i for e in self.terms for i, k in enumerate(e) if k})

    def coefficient(self, exp):
        return self.terms.get(tuple(exp), 0.0)

    def is_numeric(self):
        return all(not isinstance(c, Affine) for c in self.terms.values())

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"Polynomial({self.n_vars}, {self.terms!r})"

    # -- arithmetic --------------------------------------------------------
    def _check(self, other):
        if other.n_vars != self.n_vars:
            raise DimensionError(f"variable counts differ: {self.n_vars} vs {other.n_vars}")

    def _coerce(self, other):
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (Real, Affine)):
            return Polynomial.constant(self.n_vars, other)
        return None

    def __add__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        terms = dict(self.terms)
        for e, c in other.terms.items():
            s = terms[e] + c if e in terms else c
            if _is_zero(s):
                terms.pop(e, None)
            else:
                terms[e] = s
        return Polynomial._raw(self.n_vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw(self.n_vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (Real, Affine)):
            return self.scale(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check(other)
        terms = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = _add_exp(e1, e2)
                prod = c1 * c2
                terms[e] = terms[e] + prod if e in terms else prod
        return Polynomial._raw(self.n_vars, {e: c for e, c in terms.items() if not _is_zero(c)})

    __rmul__ = __mul__

    def scale(self, c):
        if isinstance(c, Real) and c == 0:
            return Polynomial(self.n_vars)
        terms = {e: v * c for e, v in self.terms.items()}
        return Polynomial._raw(self.n_vars, {e: v for e, v in terms.items() if not _is_zero(v)})

    def __pow__(self, k):
        out = Polynomial.constant(self.n_vars, 1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    @classmethod
    def _raw(cls, n_vars, terms):
        p = cls.__new__(cls)
        p.n_vars = n_vars
        p.terms = terms
        return p

    def substitute_affine(self, M, c=None):
        """Replace ``x = M y + c``; ``M`` has shape ``(n_vars, n_new)``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] != self.n_vars:
            raise DimensionError(f"substitution needs {self.n_vars} rows, got {M.shape[0]}")
        n_new = M.shape[1]
        c = np.zeros(self.n_vars) if c is None else np.asarray(c, dtype=float)
        images = [Polynomial.linear(n_new, M[i], c[i]) for i in range(self.n_vars)]
        out = Polynomial(n_new)
        cache = {}
        for exp, coef in self.terms.items():
            term = Polynomial.constant(n_new, 1.0)
            for i, k in enumerate(exp):
                if k:
                    key = (i, k)
                    if key not in cache:
                        cache[key] = images[i] ** k
                    term = term * cache[key]
            out = out + term.scale(coef)
        return out

    # -- evaluation --------------------------------------------------------
    def map_coefficients(self, fn):
        terms = {e: fn(c) for e, c in self.terms.items()}
        return Polynomial(self.n_vars, terms)

    def at_parameters(self, y):
        """Numeric polynomial obtained by evaluating Affine coefficients at ``y``."""
        return self.map_coefficients(lambda c: c.value(y) if isinstance(c, Affine) else float(c))

    def __call__(self, points):
        """Evaluate at one point or at the rows of a ``(m, n_vars)`` array."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.n_vars:
            raise DimensionError(f"points have {pts.shape[1]} coordinates, polynomial has {self.n_vars}")
        out = np.zeros(pts.shape[0])
        for exp, c in self.terms.items():
            if isinstance(c, Affine):
                raise TypeError("evaluate parametric coefficients first (at_parameters)")
            col = np.full(pts.shape[0], float(c))
            for i, k in enumerate(exp):
                if k:
                    col = col * pts[:, i] ** k
            out += col
        return out[0] if single else out

    def allclose(self, other, tol=1e-12):
        keys = set(self.terms) | set(other.terms)
        return all(abs(float(self.coefficient(k)) - float(other.coefficient(k))) <= tol for k in keys)


def monomial_basis(n_vars, degree, variables=None):
    """Exponent tuples of total degree ``<= degree`` over ``variables``, graded-lex."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    variables = list(range(n_vars)) if variables is None else sorted(variables)
    out = []
    for d in range(degree + 1):
        level = []
        for combo in itertools.combinations_with_replacement(variables, d):
            exp = [0] * n_vars
            for i in combo:
                exp[i] += 1
            level.append(tuple(exp))
        # graded lex: within a degree, larger exponent of earlier variables first
        level.sort(reverse=True)
        out.extend(level)
    return out


@dataclass
class SosConstraint:
    """``p == m(w)^T Q m(w)`` with ``Q`` a PSD Gram block of ``program``."""

    poly: Polynomial
    basis: list
    gram: np.ndarray  # object array of Affine
    gram_name: str
    program: ConicProgram
    matched: list  # monomials with a matching equality

    def gram_value(self, y):
        return evaluate(self.gram, y)


def compile_sos(p, basis=None, program=None, name="sos"):
    """Add ``p in SOS`` to ``program`` through a Gram matrix.

    Without an explicit ``basis`` the full basis of degree ``ceil(deg p / 2)``
    over the variables appearing in ``p`` is used.  Every monomial of ``p``
    must be a product of two basis monomials.
    """
    program = program if program is not None else ConicProgram(name)
    if basis is None:
        basis = monomial_basis(p.n_vars, math.ceil(p.degree / 2), p.variables())
    basis = [tuple(b) for b in basis]
    s = len(basis)

    products = {}
    for a in range(s):
        for b in range(a, s):
            e = _add_exp(basis[a], basis[b])
            products.setdefault(e, []).append((a, b))
    missing = [e for e in p.terms if e not in products]
    if missing:
        raise CompilationError(f"basis cannot represent monomial {missing[0]} of the polynomial")

    base = name
    k = 1
    while name in program.blocks:
        k += 1
        name = f"{base}_{k}"
    gram = program.variable(name, (s, s), cone="psd")
    for e in sorted(products):
        lhs = Affine()
        for a, b in products[e]:
            lhs = lhs + gram[a, b] * (1.0 if a == b else 2.0)
        program.add_equality(lhs - p.coefficient(e), f"{name}:{e}")
    return SosConstraint(p, basis, gram, name, program, sorted(products))


@dataclass
class SosReport:
    min_gram_eig: float
    max_match_residual: float
    min_sample: float
    accepted: bool

    def to_dict(self):
        return {
            "min_gram_eig": self.min_gram_eig,
            "max_match_residual": self.max_match_residual,
            "min_sample": self.min_sample,
            "accepted": self.accepted,
        }


def gram_polynomial(basis, Q, n_vars):
    """``m(w)^T Q m(w)`` as a numeric polynomial."""
    terms = {}
    for a, ea in enumerate(basis):
        for b, eb in enumerate(basis):
            if Q[a, b] != 0.0:
                e = _add_exp(ea, eb)
                terms[e] = terms.get(e, 0.0) + float(Q[a, b])
    return Polynomial(n_vars, terms)


def verify_sos_certificate(c, y, samples=1000, gram=None, seed=0, scale=1.0):
    """Re-check a solved SOS constraint independently of the solver.

    Accepts when the Gram matrix is PSD up to ``GRAM_EIG_TOL`` and the
    reconstructed polynomial matches ``p`` coefficient-wise up to
    ``MATCH_TOL`` (relative to ``1 + |coefficient|``).
    """
    y = np.asarray(y, dtype=float)
    Q = c.gram_value(y) if gram is None else np.asarray(gram, dtype=float)
    Q = (Q + Q.T) / 2.0
    min_eig = float(np.linalg.eigvalsh(Q)[0]) if Q.size else 0.0
    p_num = c.poly.at_parameters(y)
    recon = gram_polynomial(c.basis, Q, c.poly.n_vars)
    worst = 0.0
    for e in set(p_num.terms) | set(recon.terms):
        pc = float(p_num.coefficient(e))
        worst = max(worst, abs(pc - float(recon.coefficient(e))) / (1.0 + abs(pc)))
    if samples and c.poly.n_vars:
        rng = np.random.default_rng(seed)
        pts = rng.normal(scale=scale, size=(samples, c.poly.n_vars))
        min_sample = float(np.min(p_num(pts)))
    else:
        min_sample = float(p_num(np.zeros(c.poly.n_vars))) if c.poly.n_vars else float(p_num.coefficient(()))
    ok = min_eig >= -GRAM_EIG_TOL and worst <= MATCH_TOL
    return SosReport(min_eig, worst, min_sample, ok)


def sos_polynomial(program, n_vars, degree, name, variables=None):
    """Fresh SOS polynomial ``m(w)^T S m(w)`` of the given even degree.

    Degree 0 gives a single non-negative scalar.  Returns the polynomial
    (with Affine coefficients) and its Gram block.
    """
    if degree % 2:
        raise ValueError("SOS multipliers must have even degree")
    basis = monomial_basis(n_vars, degree // 2, variables)
    if len(basis) == 1:
        s = program.variable(name, cone="nonneg")
        return Polynomial.constant(n_vars, s), np.array([[s]], dtype=object)
    S = program.variable(name, (len(basis), len(basis)), cone="psd")
    terms = {}
    for a, ea in enumerate(basis):
        for b in range(a, len(basis)):
            e = _add_exp(ea, basis[b])
            term = S[a, b] * (1.0 if a == b else 2.0)
            terms[e] = terms[e] + term if e in terms else term
    return Polynomial(n_vars, terms), S
