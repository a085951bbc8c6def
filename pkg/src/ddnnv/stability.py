"""Data-driven Lyapunov LMI for the network-controlled loop, plus the model-based oracle.

With the loop-transformed network ``[u; v] = Nt [x; z]`` and ``|z| <= |v|``,
the data-driven program searches ``Q1 = P^-1``, diagonal ``Q2 = Lambda^-1``
and free ``L1, L2`` with

    H = [[Q1,       0,        L1' X1',  Q1 Nvx'],
         [0,        Q2,       L2' X1',  Q2 Nvz'],
         [X1 L1,    X1 L2,    Q1,       0      ],
         [Nvx Q1,   Nvz Q2,   0,        Q2     ]]  >= eps I

    [Nux Q1; Q1] = [U0; X0] L1,    [Nuz Q2; 0] = [U0; X0] L2.

``H`` is homogeneous in the unknowns, so each objective carries a
normalisation that fixes the scale without losing feasibility.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import RANK_RTOL, require_excitation
from .nn import build_stacked, check_equilibrium, loop_transform
from .sdp import ConicProgram, EIG_TOL, EQ_TOL, SolverSettings, solve

logger = logging.getLogger(__name__)

OBJECTIVES = ("feasibility", "trace_min", "trace_max")
DEFAULT_MARGIN = 1e-6


@dataclass
class StabilityCertificate:
    certified: bool
    status: str
    objective: str
    margin: float
    Q1: np.ndarray | None = None
    Q2: np.ndarray | None = None
    L1: np.ndarray | None = None
    L2: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)
    kept_neurons: np.ndarray | None = None
    exploratory: bool = False

    @property
    def verdict(self):
        if self.exploratory:
            return "exploratory-feasible" if self.residuals.get("passed") else "not-certified"
        return "certified" if self.certified else "not-certified"

    @property
    def P(self):
        return np.linalg.inv(self.Q1)

    def lyapunov(self, X):
        """``V(x) = x' Q1^-1 x`` for the rows of ``X``."""
        X = np.atleast_2d(X)
        return np.einsum("ij,ij->i", X @ self.P, X)

    def to_dict(self):
        arr = lambda a: None if a is None else np.asarray(a).tolist()
        return {
            "verdict": self.verdict,
            "status": self.status,
            "objective": self.objective,
            "epsilon": self.margin,
            "Q1": arr(self.Q1),
            "Q2_diag": None if self.Q2 is None else np.diag(self.Q2).tolist(),
            "L1": arr(self.L1),
            "L2": arr(self.L2),
            "residuals": self.residuals,
        }

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _normalise(prog, Q1, Q2, objective):
    if objective == "trace_min":
        # Q1 >= I fixes the scale; without it the trace can be driven to zero
        prog.minimize(np.trace(Q1))
        prog.add_lmi(Q1, "Q1>=I", margin=1.0)
        return
    prog.add_equality(np.trace(Q1) + np.trace(Q2) - 1.0, "trace normalisation")
    if objective == "trace_max":
        prog.maximize(np.trace(Q1))


def _check_objective(objective):
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")


def assemble_h(Q1, Q2, top_left, top_right, Nvx, Nvz):
    """Block matrix of the stability LMI.

    ``top_left``/``top_right`` are the closed-loop blocks ``X1 L1``/``X1 L2``
    (data) or ``(A + B Nux) Q1``/``B Nuz Q2`` (model).
    """
    n_x, n_z = Q1.shape[0], Q2.shape[0]
    obj = Q1.dtype == object or Q2.dtype == object or np.asarray(top_left).dtype == object
    Z = lambda r, c: np.zeros((r, c), dtype=object if obj else float)
    return np.block([
        [Q1, Z(n_x, n_z), np.asarray(top_left).T, Q1 @ Nvx.T],
        [Z(n_z, n_x), Q2, np.asarray(top_right).T, Q2 @ Nvz.T],
        [top_left, top_right, Q1, Z(n_x, n_z)],
        [Nvx @ Q1, Nvz @ Q2, Z(n_z, n_x), Q2],
    ])


def build_stability_program(transformed, data, objective="trace_min", margin=DEFAULT_MARGIN):
    _check_objective(objective)
    Tf = transformed
    n_x, n_z, K = data.n_x, Tf.n_z, data.K
    prog = ConicProgram("stability-data")
    Q1 = prog.variable("Q1", (n_x, n_x), symmetric=True)
    Q2 = prog.variable("Q2", (n_z,), diagonal=True)
    L1 = prog.variable("L1", (K, n_x))
    L2 = prog.variable("L2", (K, n_z)) if n_z else np.zeros((K, 0), dtype=object)
    X1L1 = data.X1 @ L1
    X1L2 = data.X1 @ L2 if n_z else np.zeros((n_x, 0), dtype=object)
    H = assemble_h(Q1, Q2, X1L1, X1L2, Tf.N_vx, Tf.N_vz)
    prog.add_lmi(H, "H", margin=margin)
    prog.add_equalities(Tf.N_ux @ Q1, data.U0 @ L1, "Nux Q1 = U0 L1")
    prog.add_equalities(Q1, data.X0 @ L1, "Q1 = X0 L1")
    if n_z:
        prog.add_equalities(Tf.N_uz @ Q2, data.U0 @ L2, "Nuz Q2 = U0 L2")
        prog.add_equalities(data.X0 @ L2, 0.0, "X0 L2 = 0")
    _normalise(prog, Q1, Q2, objective)
    prog.metadata.update({"objective": objective, "epsilon": margin, "blocks": ["Q1", "Q2", "L1", "L2"]})
    return prog


def build_model_program(transformed, plant, objective="trace_min", margin=DEFAULT_MARGIN):
    _check_objective(objective)
    Tf = transformed
    n_x, n_z = plant.n_x, Tf.n_z
    prog = ConicProgram("stability-model")
    Q1 = prog.variable("Q1", (n_x, n_x), symmetric=True)
    Q2 = prog.variable("Q2", (n_z,), diagonal=True)
    A_cl = plant.A + plant.B @ Tf.N_ux
    B_z = plant.B @ Tf.N_uz
    top_right = B_z @ Q2 if n_z else np.zeros((n_x, 0), dtype=object)
    H = assemble_h(Q1, Q2, A_cl @ Q1, top_right, Tf.N_vx, Tf.N_vz)
    prog.add_lmi(H, "H", margin=margin)
    _normalise(prog, Q1, Q2, objective)
    prog.metadata.update({"objective": objective, "epsilon": margin})
    return prog


def _round_to_equalities(cert, transformed, data):
    """Project ``L1, L2`` onto the data-consistency equalities.

    Interior-point answers meet the equalities only to solver precision,
    which is loose in absolute terms when ``[U0; X0]`` is badly conditioned.
    The minimum-norm correction makes them exact to round-off; the
    eigenvalue test in :func:`check_certificate` then decides on the
    corrected matrices, so the rounding cannot hide a defect.
    """
    D = data.stacked
    Dp = np.linalg.pinv(D)
    Tf = transformed
    R1 = np.vstack([Tf.N_ux @ cert.Q1, cert.Q1])
    cert.L1 = cert.L1 + Dp @ (R1 - D @ cert.L1)
    if cert.Q2.size:
        R2 = np.vstack([Tf.N_uz @ cert.Q2, np.zeros((data.n_x, cert.Q2.shape[0]))])
        cert.L2 = cert.L2 + Dp @ (R2 - D @ cert.L2)


def check_certificate(cert, transformed, data, margin):
    """Independent numeric re-check of a data-driven stability certificate."""
    Tf = transformed
    Q1, Q2, L1, L2 = cert.Q1, cert.Q2, cert.L1, cert.L2
    H = assemble_h(Q1, Q2, data.X1 @ L1, data.X1 @ L2, Tf.N_vx, Tf.N_vz)
    H = (H + H.T) / 2.0
    min_eig_h = float(np.linalg.eigvalsh(H)[0])

    def rel(lhs, rhs):
        if lhs.size == 0:
            return 0.0
        return float(np.abs(lhs - rhs).max() / (1.0 + max(np.abs(lhs).max(), np.abs(rhs).max())))

    eq = max(
        rel(Tf.N_ux @ Q1, data.U0 @ L1),
        rel(Q1, data.X0 @ L1),
        rel(Tf.N_uz @ Q2, data.U0 @ L2),
        rel(np.zeros_like(data.X0 @ L2), data.X0 @ L2),
    )
    min_eig_q1 = float(np.linalg.eigvalsh((Q1 + Q1.T) / 2.0)[0])
    min_q2 = float(np.diag(Q2).min()) if Q2.size else np.inf
    ok = (min_eig_h >= margin - EIG_TOL and eq <= EQ_TOL and min_eig_q1 > 0 and min_q2 > 0)
    return {
        "min_eig_H": min_eig_h,
        "max_equality_residual": eq,
        "min_eig_Q1": min_eig_q1,
        "min_Q2": min_q2,
        "passed": bool(ok),
    }


def _check_model_certificate(Q1, Q2, transformed, plant, margin):
    Tf = transformed
    A_cl = plant.A + plant.B @ Tf.N_ux
    H = assemble_h(Q1, Q2, A_cl @ Q1, plant.B @ Tf.N_uz @ Q2, Tf.N_vx, Tf.N_vz)
    min_eig_h = float(np.linalg.eigvalsh((H + H.T) / 2.0)[0])
    min_eig_q1 = float(np.linalg.eigvalsh(Q1)[0])
    ok = min_eig_h >= margin - EIG_TOL and min_eig_q1 > 0
    return {"min_eig_H": min_eig_h, "min_eig_Q1": min_eig_q1, "passed": bool(ok)}


def prepare_transform(net, sectors, bias_tol):
    sectors.validate(net)
    check_equilibrium(net, sectors, bias_tol)
    return loop_transform(build_stacked(net), sectors)


def verify_stability(net, sectors, data, objective="trace_min", margin=DEFAULT_MARGIN,
                     bias_tol=1e-9, settings=None, rtol=RANK_RTOL):
    """Certify asymptotic stability of ``x = 0`` from trajectory data.

    Raises :class:`~ddnnv.errors.ExcitationError` when the data fails the
    rank test and :class:`~ddnnv.errors.EquilibriumError` when the network
    biases move the equilibrium.  An infeasible program yields an uncertified
    result, which says nothing about instability.  Data flagged as noisy is
    solved as usual but never certifies (verdict ``exploratory-feasible``).
    """
    require_excitation(data, rtol)
    Tf = prepare_transform(net, sectors, bias_tol)
    # solve on column-normalised data, then map L back to the raw columns
    s = data.column_scaling()
    prog = build_stability_program(Tf, data.scaled(s), objective, margin)
    sol = solve(prog, settings or SolverSettings())
    cert = StabilityCertificate(False, sol.status, objective, margin, kept_neurons=Tf.kept)
    cert.residuals = {"solver": sol.solver_status}
    if sol.y is None:
        return cert
    n_z = Tf.n_z
    cert.Q1 = prog.block_value("Q1", sol.y)
    cert.Q2 = np.diag(prog.block_value("Q2", sol.y)) if n_z else np.zeros((0, 0))
    cert.L1 = s[:, None] * prog.block_value("L1", sol.y)
    cert.L2 = s[:, None] * prog.block_value("L2", sol.y) if n_z else np.zeros((data.K, 0))
    _round_to_equalities(cert, Tf, data)
    post = check_certificate(cert, Tf, data, margin)
    cert.residuals.update(post)
    if sol.residuals is not None:
        cert.residuals["program"] = sol.residuals.to_dict()
    cert.residuals["passed"] = bool(sol.optimal and post["passed"])
    # noisy data breaks the data identities the certificate rests on
    cert.exploratory = data.noisy
    cert.certified = cert.residuals["passed"] and not cert.exploratory
    return cert


def verify_stability_model(net, sectors, plant, objective="trace_min", margin=DEFAULT_MARGIN,
                           bias_tol=1e-9, settings=None):
    """Model-based counterpart of :func:`verify_stability` (test oracle)."""
    Tf = prepare_transform(net, sectors, bias_tol)
    prog = build_model_program(Tf, plant, objective, margin)
    sol = solve(prog, settings or SolverSettings())
    cert = StabilityCertificate(False, sol.status, objective, margin, kept_neurons=Tf.kept)
    cert.residuals = {"solver": sol.solver_status}
    if sol.y is None:
        return cert
    cert.Q1 = prog.block_value("Q1", sol.y)
    cert.Q2 = np.diag(prog.block_value("Q2", sol.y)) if Tf.n_z else np.zeros((0, 0))
    post = _check_model_certificate(cert.Q1, cert.Q2, Tf, plant, margin)
    cert.residuals.update(post)
    cert.certified = sol.optimal and post["passed"]
    return cert


def roa_ellipsoid(cert_or_q1, plane=(0, 1), n_points=256):
    """Boundary of ``{x : x' Q1^-1 x <= 1}`` in a coordinate plane.

    Coordinates outside ``plane`` are fixed at zero.  Returns an
    ``(n_points, 2)`` array of boundary points.
    """
    Q1 = cert_or_q1.Q1 if isinstance(cert_or_q1, StabilityCertificate) else np.asarray(cert_or_q1, float)
    if Q1 is None:
        raise ValueError("certificate carries no Q1")
    eig = np.linalg.eigvalsh((Q1 + Q1.T) / 2.0)
    if eig[0] <= 0:
        raise ValueError("Q1 must be positive definite")
    P = np.linalg.inv(Q1)
    i, j = plane
    P2 = P[np.ix_([i, j], [i, j])]
    theta = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    r = 1.0 / np.sqrt(np.einsum("ij,jk,ik->i", dirs, P2, dirs))
    return dirs * r[:, None]


def lyapunov_decrease(cert, net, plant, n_traj=1000, steps=200, seed=0, scale=0.5):
    """Simulate the true loop and report the worst relative change of ``V``.

    Initial states are drawn uniformly inside ``scale * E(P)``.
    Returns ``(max_ratio, n_checked)`` where ``max_ratio`` is the largest
    ``V(x+) / V(x)`` over all steps with ``V(x) > 0``.
    """
    rng = np.random.default_rng(seed)
    n = plant.n_x
    L = np.linalg.cholesky(cert.Q1)
    d = rng.normal(size=(n_traj, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(size=(n_traj, 1)) ** (1.0 / n)
    X = scale * (r * d) @ L.T
    worst, checked = 0.0, 0
    V = cert.lyapunov(X)
    for _ in range(steps):
        X = X @ plant.A.T + net.batch(X) @ plant.B.T
        V_next = cert.lyapunov(X)
        live = V > 1e-250
        if live.any():
            worst = max(worst, float(np.max(V_next[live] / V[live])))
            checked += int(live.sum())
        V = V_next
    return worst, checked
