"""Input/state trajectory data and the data-driven plant representation.

For noiseless data of ``x+ = A x + B u`` with ``[U0; X0]`` of full row rank,
``[B A] = X1 [U0; X0]^+`` and, for any ``G`` solving ``[U0; X0] G = [T; S]``,
``X1 G = B T + A S``.  The verifiers only ever use the second identity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ExcitationError

RANK_RTOL = 1e-8
CONSISTENCY_TOL = 1e-10


@dataclass(frozen=True)
class TrajectoryData:
    U0: np.ndarray
    X0: np.ndarray
    X1: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        U0 = np.atleast_2d(np.asarray(self.U0, dtype=float))
        X0 = np.atleast_2d(np.asarray(self.X0, dtype=float))
        X1 = np.atleast_2d(np.asarray(self.X1, dtype=float))
        if not (U0.shape[1] == X0.shape[1] == X1.shape[1]):
            raise DimensionError(
                f"column counts differ: U0 {U0.shape[1]}, X0 {X0.shape[1]}, X1 {X1.shape[1]}"
            )
        if X0.shape[0] != X1.shape[0]:
            raise DimensionError("X0 and X1 must have the same number of rows")
        object.__setattr__(self, "U0", U0)
        object.__setattr__(self, "X0", X0)
        object.__setattr__(self, "X1", X1)

    @property
    def K(self):
        return self.X0.shape[1]

    @property
    def n_x(self):
        return self.X0.shape[0]

    @property
    def n_u(self):
        return self.U0.shape[0]

    @property
    def stacked(self):
        return np.vstack([self.U0, self.X0])

    def head(self, K):
        """First ``K`` columns (keeps provenance)."""
        return TrajectoryData(self.U0[:, :K], self.X0[:, :K], self.X1[:, :K], dict(self.provenance))

    def column_scaling(self):
        """Per-column factors giving every ``[u; x]`` column unit norm.

        Each column is a separate ``(u, x, x+)`` triple of a linear map, so
        scaling columns leaves every data identity intact; ``L = S L_scaled``
        maps solutions of the scaled problem back.
        """
        norms = np.linalg.norm(self.stacked, axis=0)
        return np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)

    def scaled(self, s):
        s = np.asarray(s, dtype=float)
        return TrajectoryData(self.U0 * s, self.X0 * s, self.X1 * s, dict(self.provenance))

    def append(self, other):
        return TrajectoryData(
            np.hstack([self.U0, other.U0]),
            np.hstack([self.X0, other.X0]),
            np.hstack([self.X1, other.X1]),
            dict(self.provenance),
        )

    # -- CSV ---------------------------------------------------------------
    def header(self):
        return (
            [f"u_{i}" for i in range(self.n_u)]
            + [f"x_{i}" for i in range(self.n_x)]
            + [f"x1_{i}" for i in range(self.n_x)]
        )

    @property
    def noisy(self):
        """True when the samples carry injected noise (exploratory use only)."""
        return bool(self.provenance.get("noise"))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            if self.provenance:
                fh.write("# provenance: " + json.dumps(self.provenance, sort_keys=True, default=str) + "\n")
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for k in range(self.K):
                row = np.concatenate([self.U0[:, k], self.X0[:, k], self.X1[:, k]])
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path):
        prov = {}
        with open(path, newline="") as fh:
            lines = []
            for line in fh:
                if line.startswith("# provenance:"):
                    prov = json.loads(line.split(":", 1)[1])
                elif not line.startswith("#"):
                    lines.append(line)
        reader = csv.reader(lines)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in r] for r in reader if r]
        n_u = sum(h.startswith("u_") for h in header)
        n_x = sum(h.startswith("x_") for h in header)
        n_x1 = sum(h.startswith("x1_") for h in header)
        if n_x != n_x1 or n_u + n_x + n_x1 != len(header):
            raise DimensionError(f"unrecognised trajectory header {header}")
        M = np.asarray(rows, dtype=float).reshape(-1, len(header)).T
        return cls(M[:n_u], M[n_u:n_u + n_x], M[n_u + n_x:], dict(prov, source=str(path)))


@dataclass(frozen=True)
class OraclePlant:
    """Ground-truth ``(A, B)``; used to generate data and by test oracles only."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionError(f"incompatible plant shapes A{A.shape}, B{B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ x + self.B @ u

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls(obj["A"], obj["B"])

    def to_dict(self):
        return {"A": self.A.tolist(), "B": self.B.tolist()}


@dataclass(frozen=True)
class RankReport:
    rank_stacked: int
    required_stacked: int
    rank_x1: int
    required_x1: int
    singular_values_stacked: np.ndarray
    singular_values_x1: np.ndarray
    rtol: float

    @property
    def passed(self):
        return self.rank_stacked == self.required_stacked and self.rank_x1 == self.required_x1

    def describe(self):
        verdict = "pass" if self.passed else "fail"
        return (
            f"rank([U0;X0]) = {self.rank_stacked} (required {self.required_stacked}), "
            f"rank(X1) = {self.rank_x1} (required {self.required_x1}): {verdict}"
        )

    def to_dict(self):
        return {
            "rank_stacked": self.rank_stacked,
            "required_stacked": self.required_stacked,
            "rank_x1": self.rank_x1,
            "required_x1": self.required_x1,
            "singular_values_stacked": self.singular_values_stacked.tolist(),
            "singular_values_x1": self.singular_values_x1.tolist(),
            "rtol": self.rtol,
            "passed": self.passed,
        }


def numerical_rank(M, rtol=RANK_RTOL):
    s = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(0)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    return int(np.sum(s > rtol * s[0])), s


def check_excitation(data, rtol=RANK_RTOL):
    r_stack, s_stack = numerical_rank(data.stacked, rtol)
    r_x1, s_x1 = numerical_rank(data.X1, rtol)
    return RankReport(r_stack, data.n_u + data.n_x, r_x1, data.n_x, s_stack, s_x1, rtol)


def require_excitation(data, rtol=RANK_RTOL):
    report = check_excitation(data, rtol)
    if not report.passed:
        raise ExcitationError(
            f"trajectory data is not sufficiently exciting: {report.describe()}; "
            f"collect at least n_u + n_x = {report.required_stacked} informative samples",
            report,
        )
    return report


def _box(box, n, what):
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (n, 1))
    if box.shape != (n, 2):
        raise DimensionError(f"{what} must be {n} (low, high) pairs")
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError(f"{what} contains an empty interval")
    return box


def collect(plant, K, input_box, init_box, seed=0, independent=False, noise_std=0.0):
    """Simulate the plant under uniformly random inputs.

    One rollout of length ``K`` by default; with ``independent`` every column
    is its own experiment with a fresh initial state.  ``noise_std > 0`` adds
    Gaussian noise to the measured successor states; such data is flagged in
    the provenance and verifiers treat results on it as exploratory only.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    ubox = _box(input_box, plant.n_u, "input_box")
    xbox = _box(init_box, plant.n_x, "init_box")
    U0 = np.empty((plant.n_u, K))
    X0 = np.empty((plant.n_x, K))
    X1 = np.empty((plant.n_x, K))
    x = rng.uniform(xbox[:, 0], xbox[:, 1])
    for k in range(K):
        if independent and k:
            x = rng.uniform(xbox[:, 0], xbox[:, 1])
        u = rng.uniform(ubox[:, 0], ubox[:, 1])
        U0[:, k], X0[:, k] = u, x
        x = plant.step(x, u)
        X1[:, k] = x
    if noise_std > 0:
        X1 = X1 + noise_std * rng.normal(size=X1.shape)
    prov = {"seed": seed, "K": K, "independent": independent, "noise": float(noise_std) if noise_std > 0 else False}
    return TrajectoryData(U0, X0, X1, prov)


def recover_system(data, rtol=RANK_RTOL):
    """Least-squares ``(B_hat, A_hat)``; diagnostics and test oracles only."""
    require_excitation(data, rtol)
    BA = data.X1 @ np.linalg.pinv(data.stacked)
    return BA[:, : data.n_u], BA[:, data.n_u:]


def solve_consistency(data, top, bottom, rtol=RANK_RTOL, tol=CONSISTENCY_TOL):
    """Minimum-norm ``G`` with ``[U0; X0] G = [top; bottom]``."""
    top = np.atleast_2d(np.asarray(top, dtype=float))
    bottom = np.atleast_2d(np.asarray(bottom, dtype=float))
    if top.shape[0] != data.n_u and top.size:
        top = top.reshape(data.n_u, -1)
    if bottom.shape[0] != data.n_x and bottom.size:
        bottom = bottom.reshape(data.n_x, -1)
    m = max(top.shape[1] if top.size else 0, bottom.shape[1] if bottom.size else 0)
    if m == 0:
        return np.zeros((data.K, 0))
    require_excitation(data, rtol)
    rhs = np.vstack([top.reshape(data.n_u, m), bottom.reshape(data.n_x, m)])
    D = data.stacked
    G = np.linalg.pinv(D) @ rhs
    resid = np.abs(D @ G - rhs).max() / (1.0 + np.abs(rhs).max())
    if resid > tol:
        raise ExcitationError(f"data-consistency system is inconsistent (residual {resid:.2e})")
    return G
