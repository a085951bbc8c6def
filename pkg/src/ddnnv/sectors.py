"""Offset-sector bounds for activation functions and the stacked quadratic constraint."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SectorError
from .nn import Activation

W_STAR_TOL = 1e-12


def default_sector(activation, leaky_slope=0.01):
    """Globally valid ``(alpha, beta, v_star, w_star)`` for one activation kind."""
    try:
        kind = Activation(activation)
    except ValueError as exc:
        raise SectorError(f"unsupported activation {activation!r}") from exc
    if kind in (Activation.RELU, Activation.TANH):
        return 0.0, 1.0, 0.0, 0.0
    if kind is Activation.SIGMOID:
        return 0.0, 0.25, 0.0, 0.5
    if not 0.0 < leaky_slope < 1.0:
        raise SectorError("leaky ReLU slope must lie in (0, 1)")
    return float(leaky_slope), 1.0, 0.0, 0.0


@dataclass(frozen=True)
class SectorData:
    """Per-neuron offset sectors.

    ``v_lower``/``v_upper`` record the pre-activation range the sectors are
    claimed for.  Only global sectors are produced here, so both default to
    infinite bounds and no verifier consumes them yet.
    """

    alpha: np.ndarray
    beta: np.ndarray
    v_star: np.ndarray
    w_star: np.ndarray
    v_lower: float = -np.inf
    v_upper: float = np.inf

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float).reshape(-1) for a in (self.alpha, self.beta, self.v_star, self.w_star)]
        if len({a.shape for a in arrs}) != 1:
            raise DimensionError("alpha, beta, v_star and w_star must have equal length")
        for name, a in zip(("alpha", "beta", "v_star", "w_star"), arrs):
            object.__setattr__(self, name, a)
        if np.any(self.alpha > self.beta):
            i = int(np.argmax(self.alpha > self.beta))
            raise SectorError(f"neuron {i}: alpha={self.alpha[i]} > beta={self.beta[i]}")

    @property
    def n_phi(self):
        return self.alpha.shape[0]

    @classmethod
    def for_network(cls, net, overrides=None):
        """Default sectors for every neuron of ``net``, optionally overridden.

        ``overrides`` may hold ``alpha``, ``beta`` and ``v_star`` lists; the
        matching ``w_star`` is always recomputed as ``phi(v_star)``.
        """
        a, b, vs, _ = default_sector(net.activation, net.leaky_slope)
        n = net.n_phi
        alpha, beta, v_star = np.full(n, a), np.full(n, b), np.full(n, vs)
        overrides = overrides or {}
        for key, arr in (("alpha", alpha), ("beta", beta), ("v_star", v_star)):
            if key in overrides:
                val = np.asarray(overrides[key], dtype=float).reshape(-1)
                if val.shape != (n,):
                    raise DimensionError(f"override {key!r} needs {n} entries, got {val.shape[0]}")
                arr[:] = val
        w_star = net.phi(v_star)
        return cls(alpha, beta, v_star, w_star)

    @classmethod
    def load(cls, net, path):
        with open(path) as fh:
            return cls.for_network(net, json.load(fh))

    def validate(self, net, tol=W_STAR_TOL):
        """Check ``w_star == phi(v_star)`` element-wise."""
        if self.n_phi != net.n_phi:
            raise DimensionError(f"sector data covers {self.n_phi} neurons, network has {net.n_phi}")
        err = np.abs(net.phi(self.v_star) - self.w_star).max(initial=0.0)
        if err > tol:
            raise SectorError(f"w_star differs from phi(v_star) by {err:.3e}")
        return err

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("alpha", "beta", "v_star", "w_star")}


def sector_quadratic_matrix(sectors, lam):
    """``[[-2 A B L, (A+B) L], [(A+B) L, -2 L]]`` for multipliers ``lam >= 0``."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape != (sectors.n_phi,):
        raise DimensionError(f"need {sectors.n_phi} multipliers, got {lam.shape[0]}")
    if np.any(lam < 0):
        raise SectorError("sector multipliers must be non-negative")
    A, B, L = np.diag(sectors.alpha), np.diag(sectors.beta), np.diag(lam)
    return np.block([[-2.0 * A @ B @ L, (A + B) @ L], [(A + B) @ L, -2.0 * L]])


def sector_form(sectors, lam, v, w):
    """Quadratic form of the sector constraint for batches of ``(v, w)`` rows.

    Evaluated as ``sum_j 2 lam_j (dw_j - a_j dv_j)(b_j dv_j - dw_j)`` with
    ``dv = v - v*``, ``dw = w - w*``.
    """
    dv = np.atleast_2d(v) - sectors.v_star
    dw = np.atleast_2d(w) - sectors.w_star
    terms = 2.0 * lam * (dw - sectors.alpha * dv) * (sectors.beta * dv - dw)
    return terms.sum(axis=-1)

