"""Polytopic reachability, finite-horizon safety and invariance from data.

Every polytope is written ``{x : n_i'(x - center) + offset_i >= 0}``.  The
reachable-set outer approximation at step ``k`` keeps the safe set's normals
and optimises the offsets ``gamma^k``, one small SOS program per facet:

    d_i'[x+(w) - x_safe] + gamma_i
        - sum_j g_j(w) [n_j'(w0 - c_prev) + off_j]
        - sector(w)                                   is SOS in w

where ``w = [w0; w1; ...; wl]`` stacks the state and all neuron outputs and
``x+(w) = X1 G1 w0 + X1 G2 wl + X1 G3`` is the data-driven closed-loop image.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .data import RANK_RTOL, require_excitation, solve_consistency
from .errors import DimensionError
from .poly import Polynomial, compile_sos, sos_polynomial, verify_sos_certificate
from .sdp import ConicProgram, SolverSettings, solve

logger = logging.getLogger(__name__)

MULTIPLIER_DEGREES = (0, 2)


@dataclass(frozen=True)
class Polytope:
    normals: np.ndarray
    center: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        N = np.atleast_2d(np.asarray(self.normals, dtype=float))
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if N.shape[1] != c.shape[0]:
            raise DimensionError(f"normals have {N.shape[1]} columns, centre has {c.shape[0]} entries")
        off = np.ones(N.shape[0]) if self.offsets is None else np.asarray(self.offsets, dtype=float).reshape(-1)
        if off.shape[0] != N.shape[0]:
            raise DimensionError("one offset per facet is required")
        object.__setattr__(self, "normals", N)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "offsets", off)

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_facets(self):
        return self.normals.shape[0]

    @classmethod
    def box(cls, low, high):
        """Axis-aligned box written around its midpoint with unit offsets."""
        low, high = np.asarray(low, float), np.asarray(high, float)
        if np.any(high <= low):
            raise ValueError("box needs low < high in every coordinate")
        c = (low + high) / 2.0
        h = (high - low) / 2.0
        n = len(c)
        normals = np.vstack([-np.diag(1.0 / h), np.diag(1.0 / h)])
        # facet order: upper bound of x0, x1, ..., then lower bounds
        return cls(normals, c, np.ones(2 * n))

    def with_offsets(self, offsets):
        return Polytope(self.normals, self.center, offsets)

    def slack(self, X):
        X = np.atleast_2d(X)
        return (X - self.center) @ self.normals.T + self.offsets

    def contains(self, X, tol=0.0):
        return np.all(self.slack(X) >= -tol, axis=-1)

    # -- linear programming helpers ------------------------------------------
    def _lp(self, c):
        A_ub = -self.normals
        b_ub = self.offsets - self.normals @ self.center
        return linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * self.dim, method="highs")

    def min_linear(self, c):
        """``min c'x`` over the polytope (``-inf`` if unbounded, ``inf`` if empty)."""
        res = self._lp(np.asarray(c, float))
        if res.status == 3:
            return -math.inf
        if res.status == 2:
            return math.inf
        return float(res.fun)

    def is_empty(self):
        return self.min_linear(np.zeros(self.dim)) == math.inf

    def bounding_box(self):
        lo = np.array([self.min_linear(np.eye(self.dim)[i]) for i in range(self.dim)])
        hi = -np.array([self.min_linear(-np.eye(self.dim)[i]) for i in range(self.dim)])
        return lo, hi

    def contained_in(self, other, tol=1e-9):
        """``self`` is a subset of ``other`` (per-facet LP support comparison)."""
        for n, o in zip(other.normals, other.offsets):
            m = self.min_linear(n)
            if m - n @ other.center + o < -tol:
                return False
        return True

    def vertices(self, tol=1e-9):
        """Brute-force vertex enumeration (intended for dimensions <= 3)."""
        n = self.dim
        A = self.normals
        b = self.normals @ self.center - self.offsets  # facet i active: A_i x = b_i
        verts = []
        for rows in itertools.combinations(range(self.n_facets), n):
            M = A[list(rows)]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            x = np.linalg.solve(M, b[list(rows)])
            if np.all(self.slack(x) >= -tol) and not any(np.allclose(x, v, atol=1e-9) for v in verts):
                verts.append(x)
        return np.array(verts).reshape(-1, n)

    def sample(self, m, rng):
        """Uniform samples by rejection from the bounding box."""
        lo, hi = self.bounding_box()
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("cannot sample an unbounded polytope")
        out = np.empty((0, self.dim))
        while out.shape[0] < m:
            X = rng.uniform(lo, hi, size=(max(2 * (m - out.shape[0]), 64), self.dim))
            out = np.vstack([out, X[self.contains(X)]])
        return out[:m]

    def slice2d(self, plane=(0, 1), at=None):
        """Polygon of the 2-D slice through ``at`` (default: the centre), ordered."""
        i, j = plane
        at = self.center.copy() if at is None else np.asarray(at, float)
        rest = [k for k in range(self.dim) if k not in (i, j)]
        N2 = self.normals[:, [i, j]]
        off = self.offsets + self.normals[:, rest] @ (at[rest] - self.center[rest])
        sub = Polytope(N2, self.center[[i, j]], off)
        V = sub.vertices()
        if V.shape[0] < 3:
            return V
        mid = V.mean(axis=0)
        ang = np.arctan2(V[:, 1] - mid[1], V[:, 0] - mid[0])
        return V[np.argsort(ang)]

    def to_dict(self):
        return {"normals": self.normals.tolist(), "center": self.center.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["normals"], obj["center"], obj.get("offsets"))


@dataclass
class FacetCertificate:
    facet: int
    status: str
    gamma: float
    lam: np.ndarray | None = None
    multipliers: list = field(default_factory=list)
    sos: dict | None = None
    residuals: dict | None = None
    program: ConicProgram | None = field(default=None, repr=False)

    @property
    def accepted(self):
        return self.status == "optimal" and bool(self.sos and self.sos["accepted"])

    def to_dict(self):
        return {
            "facet": self.facet,
            "status": self.status,
            "gamma": self.gamma,
            "lambda": None if self.lam is None else self.lam.tolist(),
            "multipliers": self.multipliers,
            "sos": self.sos,
            "residuals": self.residuals,
        }


@dataclass
class StepResult:
    gamma: np.ndarray
    facets: list
    image: tuple = field(repr=False, default=())

    @property
    def feasible(self):
        return all(f.accepted for f in self.facets)

    def polytope(self, template):
        return template.with_offsets(self.gamma)


# ---------------------------------------------------------------------------
# Program construction
# ---------------------------------------------------------------------------

def _layer_slices(net):
    """Index slices of each hidden layer's outputs inside ``w``."""
    n_x = net.n_x
    out, start = [], n_x
    for n in net.layer_sizes:
        out.append(slice(start, start + n))
        start += n
    return out


def sector_polynomial_terms(net, sectors, n_w):
    """Per-neuron quadratics ``2 (dw - a dv)(b dv - dw)`` in the stacked variable ``w``."""
    slices = _layer_slices(net)
    prev = slice(0, net.n_x)
    terms, k = [], 0
    for layer, sl in enumerate(slices):
        W, b = net.weights[layer], net.biases[layer]
        idx_prev = list(range(prev.start, prev.stop))
        for r in range(W.shape[0]):
            dv = Polynomial.linear(n_w, W[r], b[r] - sectors.v_star[k], idx_prev)
            dw = Polynomial.linear(n_w, [1.0], -sectors.w_star[k], [sl.start + r])
            q = (dw - dv * sectors.alpha[k]) * (dv * sectors.beta[k] - dw) * 2.0
            terms.append(q)
            k += 1
        prev = sl
    return terms


def _last_layer_indices(net):
    if not net.layer_sizes:
        return list(range(net.n_x))
    sl = _layer_slices(net)[-1]
    return list(range(sl.start, sl.stop))


def data_image(net, data, rtol=RANK_RTOL):
    """``(X1 G1, X1 G2, X1 G3)`` from the data-consistency systems."""
    require_excitation(data, rtol)
    W_out, b_out = net.weights[-1], net.biases[-1]
    G1 = solve_consistency(data, np.zeros((data.n_u, data.n_x)), np.eye(data.n_x), rtol)
    G2 = solve_consistency(data, W_out, np.zeros((data.n_x, W_out.shape[1])), rtol)
    G3 = solve_consistency(data, b_out.reshape(-1, 1), np.zeros((data.n_x, 1)), rtol)
    return data.X1 @ G1, data.X1 @ G2, (data.X1 @ G3).reshape(-1), (G1, G2, G3)


def model_image(net, plant):
    return plant.A, plant.B @ net.weights[-1], plant.B @ net.biases[-1]


def build_facet_program(net, sectors, image, prev, template, facet, multiplier_degree=0,
                        sector_terms=None, name=None, products=True):
    """SOS program minimising ``gamma_facet`` for one template facet.

    With ``products`` the pairwise products ``h_j h_m`` of the previous set's
    facet polynomials join the certificate with nonnegative scalar weights.
    They are nonnegative on the previous set, so the relaxation stays sound,
    and they supply the quadratic state terms needed to dominate the sector
    cross terms ``v w`` (scalar multipliers alone cannot).
    """
    if multiplier_degree not in MULTIPLIER_DEGREES:
        raise ValueError(f"multiplier degree must be one of {MULTIPLIER_DEGREES}")
    M0, Ml, c = image[:3]
    n_x = net.n_x
    n_w = n_x + net.n_phi
    prog = ConicProgram(name or f"facet{facet}")
    gamma = prog.variable("gamma")
    lam = prog.variable("lambda", (net.n_phi,), cone="nonneg") if net.n_phi else np.zeros(0)

    d = template.normals[facet]
    last = _last_layer_indices(net)
    coeffs = list(d @ M0) + list(d @ Ml)
    idx = list(range(n_x)) + last
    p = Polynomial.linear(n_w, coeffs, float(d @ (c - template.center)), idx) + gamma

    mult_info = []
    hs = [Polynomial.linear(n_w, prev.normals[j], float(prev.offsets[j] - prev.normals[j] @ prev.center),
                            range(n_x)) for j in range(prev.n_facets)]
    for j, h in enumerate(hs):
        g, gram = sos_polynomial(prog, n_w, multiplier_degree, f"g{j}")
        p = p - g * h
        mult_info.append(gram)
    pairs = list(itertools.combinations(range(len(hs)), 2)) if products else []
    if pairs:
        tau = prog.variable("tau", (len(pairs),), cone="nonneg")
        for t, (j, m) in enumerate(pairs):
            p = p - (hs[j] * hs[m]) * tau[t]
    if sector_terms is None:
        sector_terms = sector_polynomial_terms(net, sectors, n_w)
    for k, q in enumerate(sector_terms):
        p = p - q * lam[k]
    sos = compile_sos(p, program=prog, name="gram")
    prog.minimize(gamma)
    prog.metadata.update({"facet": int(facet), "multiplier_degree": multiplier_degree,
                          "facet_products": len(pairs)})
    return prog, sos, mult_info


def _solve_facet(net, sectors, image, prev, template, facet, degree, settings, sector_terms, keep_program,
                 sos_samples, products=True):
    prog, sos, mults = build_facet_program(net, sectors, image, prev, template, facet, degree, sector_terms,
                                           products=products)
    sol = solve(prog, settings)
    cert = FacetCertificate(facet, sol.status, math.inf)
    if keep_program:
        cert.program = prog
    if sol.y is None:
        return cert
    y = sol.y
    cert.residuals = sol.residuals.to_dict() if sol.residuals else None
    rep = verify_sos_certificate(sos, y, samples=sos_samples)
    cert.sos = rep.to_dict()
    cert.gamma = float(prog.block_value("gamma", y)[0]) if prog.blocks["gamma"].indices.size else math.inf
    cert.lam = prog.block_value("lambda", y) if net.n_phi else np.zeros(0)
    cert.multipliers = [np.asarray(prog.block_value(f"g{j}", y)).tolist() for j in range(len(mults))]
    if sol.status == "optimal" and not rep.accepted:
        cert.status = "numerical-failure"
    if cert.status != "optimal":
        cert.gamma = math.inf
    return cert


def reach_step(net, sectors, data, prev, template, multiplier_degree=0, settings=None,
               facet_order=None, jobs=1, keep_programs=False, rtol=RANK_RTOL, sos_samples=200,
               products=True):
    """One-step outer approximation of the image of ``prev`` (data-driven).

    Returns a :class:`StepResult`; facets whose program is infeasible get
    ``gamma = inf`` (the approximation is unbounded in that direction).
    """
    image = data_image(net, data, rtol)
    return _reach_step(net, sectors, image, prev, template, multiplier_degree, settings,
                       facet_order, jobs, keep_programs, sos_samples, products)


def reach_step_model(net, sectors, plant, prev, template, multiplier_degree=0, settings=None,
                     facet_order=None, jobs=1, keep_programs=False, sos_samples=200, products=True):
    """Same program built from the true ``(A, B)`` (test oracle)."""
    image = model_image(net, plant)
    return _reach_step(net, sectors, image, prev, template, multiplier_degree, settings,
                       facet_order, jobs, keep_programs, sos_samples, products)


def _reach_step(net, sectors, image, prev, template, degree, settings, order, jobs, keep, sos_samples,
                products=True):
    if prev.dim != net.n_x or template.dim != net.n_x:
        raise DimensionError("polytope dimension must equal the state dimension")
    sectors.validate(net)
    settings = settings or SolverSettings()
    n_w = net.n_x + net.n_phi
    terms = sector_polynomial_terms(net, sectors, n_w)
    order = list(range(template.n_facets)) if order is None else list(order)
    run = lambda i: _solve_facet(net, sectors, image, prev, template, i, degree, settings, terms, keep,
                                 sos_samples, products)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            certs = list(pool.map(run, order))
    else:
        certs = [run(i) for i in order]
    certs.sort(key=lambda c: c.facet)
    gamma = np.array([c.gamma for c in certs])
    return StepResult(gamma, certs, tuple(image))


# ---------------------------------------------------------------------------
# Safety and invariance
# ---------------------------------------------------------------------------

@dataclass
class ReachResult:
    steps: list
    horizon: int
    safe_until: int
    verdict: str
    message: str = ""

    @property
    def gammas(self):
        return [s.gamma for s in self.steps]

    @property
    def safe(self):
        return self.verdict == "safe"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "horizon": self.horizon,
            "safe_until": self.safe_until,
            "message": self.message,
            "gamma": [[None if not math.isfinite(g) else g for g in s.gamma] for s in self.steps],
            "steps": [[f.to_dict() for f in s.facets] for s in self.steps],
        }


def verify_safety(net, sectors, data, input_set, safe_set, horizon, multiplier_degree=0,
                  settings=None, jobs=1, rtol=RANK_RTOL, keep_programs=False, products=True):
    """Certify ``x(k)`` in the safe set for ``k = 1..horizon`` and all ``x(0)`` in the input set.

    Step 1 uses the input set's facets with unit offsets; later steps reuse
    the safe-set normals with the previous step's offsets.  The verdict is
    ``safe`` when every offset is at most 1 for all steps.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not input_set.contained_in(safe_set):
        raise ValueError("the input set must be contained in the safe set")
    image = data_image(net, data, rtol)
    template = safe_set.with_offsets(np.ones(safe_set.n_facets))
    prev = input_set
    steps = []
    safe_until, broken = 0, False
    message = ""
    for k in range(1, horizon + 1):
        step = _reach_step(net, sectors, image, prev, template, multiplier_degree, settings,
                           None, jobs, keep_programs, 200, products)
        steps.append(step)
        if not np.all(np.isfinite(step.gamma)):
            message = f"not certified beyond step {k - 1}: step {k} has unbounded facets"
            broken = True
            break
        if not broken and np.all(step.gamma <= 1.0):
            safe_until = k
        else:
            broken = True
        prev = template.with_offsets(step.gamma)
    verdict = "safe" if safe_until == horizon else "not-certified"
    if not message:
        message = f"certified safe for k = 1..{safe_until}" if safe_until else "not certified at step 1"
    if data.noisy:
        verdict = "exploratory-feasible" if verdict == "safe" else verdict
        message += " (noisy data: exploratory, not a certificate)"
    return ReachResult(steps, horizon, safe_until, verdict, message)


@dataclass
class InvarianceResult:
    gamma: np.ndarray
    invariant: bool
    step: StepResult
    exploratory: bool = False

    @property
    def verdict(self):
        if self.exploratory:
            return "exploratory-feasible" if bool(np.all(self.gamma <= 1.0)) else "not-certified"
        return "invariant" if self.invariant else "not-certified"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "gamma": [None if not math.isfinite(g) else g for g in self.gamma],
            "facets": [f.to_dict() for f in self.step.facets],
        }


def verify_invariance(net, sectors, data, invariant_set, multiplier_degree=0, settings=None,
                      jobs=1, rtol=RANK_RTOL, keep_programs=False, products=True):
    """One-step reachability from ``B`` with ``B``'s own facets as template."""
    B = invariant_set.with_offsets(np.ones(invariant_set.n_facets))
    step = reach_step(net, sectors, data, B, B, multiplier_degree, settings, None, jobs, keep_programs, rtol,
                      products=products)
    ok = bool(np.all(np.isfinite(step.gamma)) and np.all(step.gamma <= 1.0))
    return InvarianceResult(step.gamma, ok and not data.noisy, step, data.noisy)


def safety_via_invariance(input_set, invariant_set, safe_set, invariance):
    """``safe`` when the input set lies in a certified invariant set inside the safe set."""
    if not (input_set.contained_in(invariant_set) and invariant_set.contained_in(safe_set)):
        return "not-applicable"
    ok = invariance.invariant if isinstance(invariance, InvarianceResult) else bool(invariance)
    return "safe" if ok else "not-certified"


def load_problem(path):
    """Problem JSON with optional ``input_set``, ``safe_set``, ``invariant_set``."""
    with open(path) as fh:
        obj = json.load(fh)
    out = {}
    for key in ("input_set", "safe_set", "invariant_set"):
        if key in obj:
            out[key] = Polytope.from_dict(obj[key])
    out["horizon"] = int(obj.get("horizon", 1))
    out["multiplier_degree"] = int(obj.get("multiplier_degree", 0))
    return out
