"""Conic program model, solver bridge, SDPA export and solution post-verification.

Programs are written over a flat vector ``y`` of free scalar decision
variables.  Named blocks (``Q1``, ``L2``, ``gram_3`` ...) are views onto
slices of ``y``.  Constraints are

* affine equalities ``a(y) == 0``,
* scalar non-negativity ``a(y) >= 0``,
* linear matrix inequalities ``F(y) - margin * I >= 0`` (PSD),

and the objective is a linear function that is minimised.  The embedded
backend is cvxpy (Clarabel interior point by default); any other conic
solver can be used through the SDPA export.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from numbers import Real

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

EQ_TOL = 1e-6
EIG_TOL = 1e-7

_EQ_TAG = "*ddnnv-equalities"
_META_TAG = "*ddnnv-meta"


class Affine:
    """Sparse affine function ``sum_i c_i y_i + const`` of the decision vector."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = {} if terms is None else terms
        self.const = float(const)

    @classmethod
    def var(cls, index):
        return cls({index: 1.0})

    def copy(self):
        return Affine(dict(self.terms), self.const)

    def __add__(self, other):
        if isinstance(other, Affine):
            terms = dict(self.terms)
            for k, v in other.terms.items():
                s = terms.get(k, 0.0) + v
                if s == 0.0:
                    terms.pop(k, None)
                else:
                    terms[k] = s
            return Affine(terms, self.const + other.const)
        if isinstance(other, Real):
            return Affine(dict(self.terms), self.const + float(other))
        return NotImplemented

    __radd__ = __add__

    def __neg__(self):
        return Affine({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        if isinstance(other, (Affine, Real)):
            return self + (-other)
        return NotImplemented

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Real):
            c = float(other)
            if c == 0.0:
                return Affine()
            return Affine({k: c * v for k, v in self.terms.items()}, c * self.const)
        if isinstance(other, Affine):
            if not other.terms:
                return self * other.const
            if not self.terms:
                return other * self.const
            raise TypeError("product of two non-constant affine expressions is not affine")
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))

    def is_zero(self):
        return not self.terms and self.const == 0.0

    def is_constant(self):
        return not self.terms

    def value(self, y):
        return self.const + sum(c * y[k] for k, c in self.terms.items())

    def scale(self, y):
        """Largest absolute summand at ``y`` (used for relative residuals)."""
        mags = [abs(self.const)] + [abs(c * y[k]) for k, c in self.terms.items()]
        return max(mags)

    def __repr__(self):
        parts = [f"{c:+g}*y{k}" for k, c in sorted(self.terms.items())]
        return "Affine(" + " ".join(parts + [f"{self.const:+g}"]) + ")"


def as_affine(x):
    if isinstance(x, Affine):
        return x
    return Affine(const=float(x))


def evaluate(expr, y):
    """Evaluate an Affine, a number or an object array of either at ``y``."""
    if isinstance(expr, np.ndarray):
        out = np.empty(expr.shape)
        for idx, e in np.ndenumerate(expr):
            out[idx] = e.value(y) if isinstance(e, Affine) else float(e)
        return out
    if isinstance(expr, Affine):
        return expr.value(y)
    return float(expr)


@dataclass
class VarBlock:
    name: str
    shape: tuple
    indices: np.ndarray
    cone: str = "free"
    symmetric: bool = False

    def to_meta(self):
        return {
            "name": self.name,
            "shape": list(self.shape),
            "indices": self.indices.ravel().tolist(),
            "cone": self.cone,
            "symmetric": self.symmetric,
        }


@dataclass
class LMI:
    name: str
    size: int
    entries: list  # (i, j, Affine) with i <= j
    margin: float = 0.0

    def evaluate(self, y):
        F = np.zeros((self.size, self.size))
        for i, j, a in self.entries:
            v = a.value(y)
            F[i, j] = v
            F[j, i] = v
        return F


class ConicProgram:
    """Linear objective, affine equalities, non-negativity and LMI constraints."""

    def __init__(self, name="program"):
        self.name = name
        self.n_vars = 0
        self.blocks = {}
        self.objective = Affine()
        self.sense = "min"
        self.equalities = []
        self.nonneg = []
        self.lmis = []
        self.metadata = {}

    # -- variables ---------------------------------------------------------
    def _fresh(self, count):
        idx = np.arange(self.n_vars, self.n_vars + count)
        self.n_vars += count
        return idx

    def variable(self, name, shape=(), symmetric=False, cone="free", diagonal=False):
        """Declare a named block and return it as an Affine or object array.

        ``cone='psd'`` adds the PSD constraint on the (symmetric) block,
        ``cone='nonneg'`` adds element-wise non-negativity.  ``diagonal``
        returns an ``n x n`` object matrix whose off-diagonal entries are 0,
        backed by ``n`` scalars.
        """
        if name in self.blocks:
            raise ValueError(f"duplicate block name {name!r}")
        shape = tuple(int(s) for s in (shape if isinstance(shape, tuple) else (shape,)))
        if cone == "psd":
            symmetric = True
        if diagonal:
            n = shape[0]
            idx = self._fresh(n)
            block = VarBlock(name, (n,), idx, cone if cone != "psd" else "nonneg")
            self.blocks[name] = block
            M = np.empty((n, n), dtype=object)
            for i in range(n):
                for j in range(n):
                    M[i, j] = Affine.var(int(idx[i])) if i == j else Affine()
            if cone in ("psd", "nonneg"):
                for i in range(n):
                    self.add_nonneg(M[i, i], f"{name}[{i}]>=0")
            return M
        if symmetric:
            n = shape[0]
            if shape != (n, n):
                raise ValueError("symmetric blocks must be square")
            idx = self._fresh(n * (n + 1) // 2)
            full = np.empty((n, n), dtype=int)
            k = 0
            for i in range(n):
                for j in range(i, n):
                    full[i, j] = full[j, i] = idx[k]
                    k += 1
            block = VarBlock(name, shape, full, cone, True)
        else:
            count = int(np.prod(shape)) if shape else 1
            full = self._fresh(count).reshape(shape) if shape else self._fresh(1)
            block = VarBlock(name, shape, np.asarray(full), cone)
        self.blocks[name] = block
        if not shape:
            expr = Affine.var(int(block.indices.ravel()[0]))
            if cone == "nonneg":
                self.add_nonneg(expr, f"{name}>=0")
            return expr
        M = np.empty(shape, dtype=object)
        for pos, k in np.ndenumerate(block.indices):
            M[pos] = Affine.var(int(k))
        if cone == "psd":
            self.add_lmi(M, f"{name}>=0")
        elif cone == "nonneg":
            for pos, e in np.ndenumerate(M):
                self.add_nonneg(e, f"{name}{list(pos)}>=0")
        return M

    # -- constraints -------------------------------------------------------
    def add_equality(self, expr, name=""):
        expr = as_affine(expr)
        if expr.is_zero():
            return
        self.equalities.append((name, expr))

    def add_equalities(self, lhs, rhs=0.0, name=""):
        """Element-wise ``lhs == rhs`` for arrays of Affine/numbers."""
        diff = np.asarray(lhs, dtype=object) - np.asarray(rhs, dtype=object)
        for pos, e in np.ndenumerate(np.atleast_1d(diff)):
            self.add_equality(e, f"{name}{list(pos)}")

    def add_nonneg(self, expr, name=""):
        self.nonneg.append((name, as_affine(expr)))

    def add_lmi(self, matrix, name="", margin=0.0):
        """Require ``matrix - margin * I`` PSD; only the upper triangle is read."""
        M = np.asarray(matrix, dtype=object)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("LMI matrix must be square")
        n = M.shape[0]
        entries = []
        for i in range(n):
            for j in range(i, n):
                a = as_affine(M[i, j])
                if not a.is_zero():
                    entries.append((i, j, a))
        self.lmis.append(LMI(name, n, entries, float(margin)))

    def minimize(self, expr):
        self.objective = as_affine(expr)
        self.sense = "min"

    def maximize(self, expr):
        self.objective = -as_affine(expr)
        self.sense = "max"

    # -- sparse views used by the solver and the exporter ------------------
    def _rows(self, exprs):
        rows, cols, vals = [], [], []
        const = np.zeros(len(exprs))
        for r, a in enumerate(exprs):
            const[r] = a.const
            for k, c in a.terms.items():
                rows.append(r)
                cols.append(k)
                vals.append(c)
        M = sp.csr_matrix((vals, (rows, cols)), shape=(len(exprs), self.n_vars))
        return M, const

    def equality_data(self):
        """``(A, a0)`` with the equalities reading ``A y + a0 == 0``."""
        return self._rows([e for _, e in self.equalities])

    def nonneg_data(self):
        return self._rows([e for _, e in self.nonneg])

    def lmi_data(self, lmi):
        """``(M, f0)`` with ``vec(F(y)) = M y + f0`` (row-major, full square)."""
        n = lmi.size
        rows, cols, vals = [], [], []
        f0 = np.zeros(n * n)
        for i, j, a in lmi.entries:
            for r in {i * n + j, j * n + i}:
                f0[r] = a.const
                for k, c in a.terms.items():
                    rows.append(r)
                    cols.append(k)
                    vals.append(c)
        M = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, self.n_vars))
        return M, f0

    def block_value(self, name, y):
        block = self.blocks[name]
        y = np.asarray(y)
        return y[block.indices]

    def summary(self):
        return {
            "name": self.name,
            "n_vars": self.n_vars,
            "equalities": len(self.equalities),
            "nonneg": len(self.nonneg),
            "lmi_sizes": [l.size for l in self.lmis],
        }


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

@dataclass
class SolverSettings:
    solver: str = field(default_factory=lambda: os.environ.get("DDNNV_SOLVER", "CLARABEL"))
    tol: float = 1e-8
    verbose: bool = False
    fallback: tuple = ("CVXOPT",)


@dataclass
class ResidualReport:
    max_equality_residual: float
    worst_equality: str
    min_lmi_eigs: dict
    lmi_margins: dict
    min_nonneg: float
    passed: bool

    def to_dict(self):
        return {
            "max_equality_residual": self.max_equality_residual,
            "worst_equality": self.worst_equality,
            "min_lmi_eigs": self.min_lmi_eigs,
            "lmi_margins": self.lmi_margins,
            "min_nonneg": self.min_nonneg,
            "passed": self.passed,
        }


@dataclass
class Solution:
    status: str
    y: np.ndarray | None
    objective: float
    residuals: ResidualReport | None = None
    solver_status: str = ""

    @property
    def optimal(self):
        return self.status == "optimal"

    def __getitem__(self, name):
        raise TypeError("use program.block_value(name, solution.y)")

    def to_dict(self, program=None):
        out = {
            "status": self.status,
            "solver_status": self.solver_status,
            "objective": self.objective,
            "residuals": None if self.residuals is None else self.residuals.to_dict(),
        }
        if program is not None and self.y is not None:
            out["blocks"] = {
                name: program.block_value(name, self.y).tolist() for name in program.blocks
            }
        return out

    def dump_json(self, path, program=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(program), fh, indent=2, sort_keys=True)


def _solver_kwargs(settings):
    name = settings.solver.upper()
    tol = settings.tol
    if name == "CLARABEL":
        return {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol, "max_iter": 500}
    if name == "CVXOPT":
        return {"abstol": tol, "reltol": tol, "feastol": tol, "max_iters": 500}
    if name == "SCS":
        return {"eps_abs": tol, "eps_rel": tol, "max_iters": 200000}
    return {}


def solve(program, settings=None):
    """Solve ``program`` with the configured cvxpy backend.

    Failures inside the backend never propagate: they come back as
    ``status='numerical-failure'``.  An ``optimal`` status is only kept when
    :func:`verify_solution` accepts the point.  On a numerical failure the
    solvers in ``settings.fallback`` are tried in order.
    """
    settings = settings or SolverSettings()
    sol = _solve_once(program, settings)
    for name in settings.fallback:
        if sol.status != "numerical-failure" or name.upper() == settings.solver.upper():
            continue
        retry = _solve_once(program, SolverSettings(name, settings.tol, settings.verbose, ()))
        if retry.status != "numerical-failure":
            retry.solver_status = f"{name.lower()}: {retry.solver_status}"
            return retry
    return sol


def _solve_once(program, settings):
    import cvxpy as cp

    n = program.n_vars
    if n == 0:
        y0 = np.zeros(0)
        rep = verify_solution(program, y0)
        status = "optimal" if rep.passed else "infeasible"
        return Solution(status, y0, program.objective.const, rep, "trivial")

    y = cp.Variable(n)
    cons = []
    if program.equalities:
        A, a0 = program.equality_data()
        cons.append(A @ y + a0 == 0)
    if program.nonneg:
        G, h = program.nonneg_data()
        cons.append(G @ y + h >= 0)
    for lmi in program.lmis:
        M, f0 = program.lmi_data(lmi)
        S = cp.reshape(M @ y + f0, (lmi.size, lmi.size), order="C")
        if lmi.margin:
            S = S - lmi.margin * np.eye(lmi.size)
        cons.append(S >> 0)
    c, c0 = program._rows([program.objective])
    obj = cp.Minimize(c @ y + c0[0])
    prob = cp.Problem(obj, cons)
    try:
        # "inaccurate" answers are judged by verify_solution below, not by the warning
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            prob.solve(solver=settings.solver.upper(), verbose=settings.verbose,
                       **_solver_kwargs(settings))
    except (KeyboardInterrupt, SystemExit):
        raise
    except BaseException as exc:  # Clarabel panics surface as BaseException
        logger.info("solver error on %s: %s", program.name, exc)
        return Solution("numerical-failure", None, math.nan, None, f"error: {exc}")

    raw = prob.status
    if raw.endswith("_inaccurate"):
        logger.info("%s: solver status %s", program.name, raw)
    if raw in ("infeasible", "infeasible_inaccurate"):
        return Solution("infeasible", None, math.inf, None, raw)
    if raw not in ("optimal", "optimal_inaccurate") or y.value is None:
        return Solution("numerical-failure", None, math.nan, None, raw)

    yv = np.asarray(y.value, dtype=float).ravel()
    rep = verify_solution(program, yv)
    objective = program.objective.value(yv)
    if program.sense == "max":
        objective = -objective
    status = "optimal" if rep.passed else "numerical-failure"
    if not rep.passed:
        logger.info("%s: solver returned %s but post-verification failed", program.name, raw)
    return Solution(status, yv, objective, rep, raw)


def verify_solution(program, solution, eq_tol=EQ_TOL, eig_tol=EIG_TOL):
    """Recompute every residual of ``program`` at a candidate point.

    Works entry by entry on the stored affine expressions rather than on the
    sparse matrices handed to the solver.  Equality residuals are relative to
    ``1 + scale`` where ``scale`` is the largest summand of that equality.
    """
    y = solution.y if isinstance(solution, Solution) else solution
    if y is None:
        return ResidualReport(math.inf, "", {}, {}, -math.inf, False)
    y = np.asarray(y, dtype=float)

    worst, worst_name = 0.0, ""
    for name, e in program.equalities:
        r = abs(e.value(y)) / (1.0 + e.scale(y))
        if r > worst:
            worst, worst_name = r, name

    eigs, margins = {}, {}
    ok = worst <= eq_tol
    for k, lmi in enumerate(program.lmis):
        key = lmi.name or f"lmi{k}"
        F = lmi.evaluate(y)
        lam = float(np.linalg.eigvalsh(F)[0]) if lmi.size else math.inf
        eigs[key] = lam
        margins[key] = lmi.margin
        if lam < lmi.margin - eig_tol:
            ok = False
    min_nn = min((e.value(y) for _, e in program.nonneg), default=math.inf)
    if min_nn < -eig_tol:
        ok = False
    return ResidualReport(float(worst), worst_name, eigs, margins, float(min_nn), bool(ok))


# ---------------------------------------------------------------------------
# SDPA sparse format
# ---------------------------------------------------------------------------
#
# SDPA primal form: minimise c.x subject to sum_i F_i x_i - F_0 >= 0.
# Our LMIs F(y) - margin I >= 0 map to F_0 = -(const - margin I).  Scalar
# non-negativity goes to one diagonal (LP) block; equalities a(y) = 0 are
# written as a second LP block holding the pair a >= 0, -a >= 0, flagged in a
# comment so the importer can restore them as equalities.

def _fmt(v):
    return repr(float(v))


def export_sdpa(program, path):
    """Write ``program`` in SDPA sparse format (``.dat-s``), deterministically."""
    text = sdpa_text(program)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def sdpa_text(program):
    n = program.n_vars
    blocks = []  # (size, list of (i, j, Affine), is_lp)
    for lmi in program.lmis:
        ents = [(i, j, a - (lmi.margin if i == j else 0.0)) for i, j, a in lmi.entries]
        if lmi.margin:
            present = {(i, j) for i, j, _ in lmi.entries}
            ents += [(i, i, Affine(const=-lmi.margin)) for i in range(lmi.size)
                     if (i, i) not in present]
        blocks.append((lmi.size, ents, False))
    if program.nonneg:
        blocks.append((len(program.nonneg), [(r, r, a) for r, (_, a) in enumerate(program.nonneg)], True))
    n_eq = len(program.equalities)
    if n_eq:
        ents = []
        for r, (_, a) in enumerate(program.equalities):
            ents.append((2 * r, 2 * r, a))
            ents.append((2 * r + 1, 2 * r + 1, -a))
        blocks.append((2 * n_eq, ents, True))

    meta = {
        "name": program.name,
        "sense": program.sense,
        "objective_constant": program.objective.const,
        "blocks": [b.to_meta() for b in program.blocks.values()],
        "lmi_names": [l.name for l in program.lmis],
        "lmi_margins": [l.margin for l in program.lmis],
        "nonneg_names": [nm for nm, _ in program.nonneg],
        "equality_names": [nm for nm, _ in program.equalities],
    }
    lines = [f'"ddnnv conic program {program.name}']
    lines.append(f"{_META_TAG} {json.dumps(meta, sort_keys=True)}")
    lines.append(f"{_EQ_TAG} {len(blocks) if n_eq else 0}")
    lines.append(str(n))
    lines.append(str(len(blocks)))
    lines.append(" ".join(str(-s if lp else s) for s, _, lp in blocks))
    c = np.zeros(n)
    for k, v in program.objective.terms.items():
        c[k] = v
    lines.append(" ".join(_fmt(v) for v in c))
    records = []
    for b, (_, ents, _) in enumerate(blocks, start=1):
        for i, j, a in ents:
            if a.const != 0.0:
                records.append((0, b, i + 1, j + 1, -a.const))
            for k, v in a.terms.items():
                records.append((k + 1, b, i + 1, j + 1, v))
    records.sort(key=lambda r: r[:4])
    for mat, b, i, j, v in records:
        lines.append(f"{mat} {b} {i} {j} {_fmt(v)}")
    return "\n".join(lines) + "\n"


def import_sdpa(path):
    """Read an SDPA sparse file back into a :class:`ConicProgram`."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    meta, eq_block = None, 0
    body = []
    for line in raw:
        s = line.strip()
        if s.startswith(_META_TAG):
            meta = json.loads(s[len(_META_TAG):])
        elif s.startswith(_EQ_TAG):
            eq_block = int(s[len(_EQ_TAG):])
        elif s.startswith('"') or s.startswith("*"):
            continue
        else:
            body.append(s)
    m = int(body[0].split()[0])
    nblocks = int(body[1].split()[0])
    sizes = [int(float(t)) for t in body[2].replace(",", " ").replace("{", " ").replace("}", " ").split()] if nblocks else []
    c = [float(t) for t in body[3].replace(",", " ").split()] if m else []

    prog = ConicProgram(meta["name"] if meta else "imported")
    prog.n_vars = m
    entries = [dict() for _ in range(nblocks)]  # (i, j) -> Affine
    for line in body[4:]:
        if not line:
            continue
        mat, b, i, j, v = line.split()
        mat, b, i, j, v = int(mat), int(b) - 1, int(i) - 1, int(j) - 1, float(v)
        a = entries[b].setdefault((min(i, j), max(i, j)), Affine())
        if mat == 0:
            a.const -= v
        else:
            a.terms[mat - 1] = a.terms.get(mat - 1, 0.0) + v

    lmi_names = meta["lmi_names"] if meta else []
    lmi_margins = meta["lmi_margins"] if meta else []
    nonneg_names = meta["nonneg_names"] if meta else []
    eq_names = meta["equality_names"] if meta else []
    k_lmi = 0
    for b, size in enumerate(sizes):
        ents = entries[b]
        if size > 0:
            margin = lmi_margins[k_lmi] if k_lmi < len(lmi_margins) else 0.0
            name = lmi_names[k_lmi] if k_lmi < len(lmi_names) else f"block{b + 1}"
            lst = []
            for (i, j) in sorted(ents):
                a = ents[(i, j)]
                if i == j and margin:
                    a = a + margin
                if not a.is_zero():
                    lst.append((i, j, a))
            prog.lmis.append(LMI(name, size, lst, margin))
            k_lmi += 1
        elif eq_block and b + 1 == eq_block:
            for r in range(-size // 2):
                a = ents.get((2 * r, 2 * r), Affine())
                nm = eq_names[r] if r < len(eq_names) else ""
                prog.equalities.append((nm, a))
        else:
            for r in range(-size):
                a = ents.get((r, r), Affine())
                nm = nonneg_names[r] if r < len(nonneg_names) else ""
                prog.nonneg.append((nm, a))
    terms = {k: v for k, v in enumerate(c) if v != 0.0}
    const = meta["objective_constant"] if meta else 0.0
    prog.objective = Affine(terms, const)
    if meta:
        prog.sense = meta["sense"]
        for bm in meta["blocks"]:
            shape = tuple(bm["shape"])
            idx = np.asarray(bm["indices"], dtype=int).reshape(shape if shape else (1,))
            prog.blocks[bm["name"]] = VarBlock(bm["name"], shape, idx, bm["cone"], bm["symmetric"])
    return prog


def programs_equal(p, q, tol=0.0):
    """Structural equality of two programs (objective, constraints, margins)."""
    if p.n_vars != q.n_vars or p.sense != q.sense:
        return False
    if abs(p.objective.const - q.objective.const) > tol:
        return False

    def dense(a, n):
        v = np.zeros(n + 1)
        v[n] = a.const
        for k, c in a.terms.items():
            v[k] = c
        return v

    n = p.n_vars
    if not np.allclose(dense(p.objective, n)[:n], dense(q.objective, n)[:n], atol=tol, rtol=0):
        return False
    for xs, ys in ((p.equalities, q.equalities), (p.nonneg, q.nonneg)):
        if len(xs) != len(ys):
            return False
        for (_, a), (_, b) in zip(xs, ys):
            if not np.allclose(dense(a, n), dense(b, n), atol=tol, rtol=0):
                return False
    if len(p.lmis) != len(q.lmis):
        return False
    for a, b in zip(p.lmis, q.lmis):
        if a.size != b.size or a.margin != b.margin:
            return False
        Ma, fa = p.lmi_data(a)
        Mb, fb = q.lmi_data(b)
        if abs(Ma - Mb).max() > tol if Ma.nnz or Mb.nnz else False:
            return False
        if not np.allclose(fa, fb, atol=tol, rtol=0):
            return False
    return True
