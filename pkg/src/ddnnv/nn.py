"""Feed-forward network controller and its stacked / loop-transformed forms.

A network with ``l`` hidden layers is evaluated as

    w0 = x,  v_i = W_i w_{i-1} + b_i,  w_i = phi(v_i),  u = W_{l+1} w_l + b_{l+1}

and isolated into the linear map ``[u; v_phi] = N [x; w_phi] + [b_u; b_v]``
feeding the stacked element-wise nonlinearity ``w_phi = phi(v_phi)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EquilibriumError, SectorError


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    LEAKY_RELU = "leaky_relu"


def activate(kind, v, slope=0.01):
    kind = Activation(kind)
    if kind is Activation.RELU:
        return np.maximum(v, 0.0)
    if kind is Activation.TANH:
        return np.tanh(v)
    if kind is Activation.SIGMOID:
        # split form avoids overflow in exp for large |v|
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    return np.where(v >= 0, v, slope * v)


@dataclass(frozen=True)
class NeuralNetwork:
    """Layers ``[(W1, b1), ..., (W_{l+1}, b_{l+1})]`` with one activation kind."""

    weights: tuple
    biases: tuple
    activation: Activation = Activation.RELU
    leaky_slope: float = 0.01

    def __post_init__(self):
        Ws = tuple(np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights)
        bs = tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.biases)
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activation", Activation(self.activation))
        if not Ws:
            raise DimensionError("network needs at least the output layer")
        if len(Ws) != len(bs):
            raise DimensionError("one bias vector per weight matrix is required")
        for i, (W, b) in enumerate(zip(Ws, bs)):
            if W.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {i + 1}: W has {W.shape[0]} rows, b has {b.shape[0]}")
            if i and W.shape[1] != Ws[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i + 1}: expects {W.shape[1]} inputs, previous layer has {Ws[i - 1].shape[0]}"
                )
        if self.activation is Activation.LEAKY_RELU and not 0.0 < self.leaky_slope < 1.0:
            raise SectorError("leaky ReLU slope must lie in (0, 1)")

    @property
    def n_x(self):
        return self.weights[0].shape[1]

    @property
    def n_u(self):
        return self.weights[-1].shape[0]

    @property
    def n_hidden_layers(self):
        return len(self.weights) - 1

    @property
    def layer_sizes(self):
        return [W.shape[0] for W in self.weights[:-1]]

    @property
    def n_phi(self):
        return sum(self.layer_sizes)

    def phi(self, v):
        return activate(self.activation, v, self.leaky_slope)

    def __call__(self, x):
        return forward(self, x)[0]

    def batch(self, X):
        """Evaluate on the rows of ``X`` (shape ``(m, n_x)``); returns ``(m, n_u)``."""
        h = np.asarray(X, dtype=float)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self.phi(h @ W.T + b)
        return h @ self.weights[-1].T + self.biases[-1]

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self):
        out = {
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
            "activation": self.activation.value,
        }
        if self.activation is Activation.LEAKY_RELU:
            out["leaky_slope"] = self.leaky_slope
        return out

    @classmethod
    def from_dict(cls, obj):
        layers = obj["layers"]
        return cls(
            tuple(layer["W"] for layer in layers),
            tuple(layer["b"] for layer in layers),
            Activation(obj.get("activation", "relu")),
            float(obj.get("leaky_slope", 0.01)),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def forward(net, x):
    """Return ``(u, v_phi, w_phi)`` for a single state ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != net.n_x:
        raise DimensionError(f"state has length {x.shape[0]}, network expects {net.n_x}")
    vs, ws = [], []
    h = x
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        v = W @ h + b
        h = net.phi(v)
        vs.append(v)
        ws.append(h)
    u = net.weights[-1] @ h + net.biases[-1]
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return u, cat(vs), cat(ws)


@dataclass(frozen=True)
class StackedForm:
    N_ux: np.ndarray
    N_uw: np.ndarray
    N_vx: np.ndarray
    N_vw: np.ndarray
    b_u: np.ndarray
    b_v: np.ndarray
    layer_sizes: tuple = ()

    @property
    def n_phi(self):
        return self.N_vw.shape[0]

    @property
    def N(self):
        return np.block([[self.N_ux, self.N_uw], [self.N_vx, self.N_vw]])

    def evaluate(self, x, w_phi):
        """``[u; v_phi]`` from the linear part given the neuron outputs."""
        x = np.asarray(x, float)
        w_phi = np.asarray(w_phi, float)
        u = self.N_ux @ x + self.N_uw @ w_phi + self.b_u
        v = self.N_vx @ x + self.N_vw @ w_phi + self.b_v
        return u, v


def build_stacked(net):
    """Block-sparse matrix ``N`` isolating every neuron of ``net``."""
    sizes = net.layer_sizes
    n_x, n_u, n_phi = net.n_x, net.n_u, net.n_phi
    if not sizes:
        return StackedForm(net.weights[0].copy(), np.zeros((n_u, 0)), np.zeros((0, n_x)),
                           np.zeros((0, 0)), net.biases[0].copy(), np.zeros(0), ())
    offs = np.concatenate([[0], np.cumsum(sizes)])
    N_ux = np.zeros((n_u, n_x))
    N_uw = np.zeros((n_u, n_phi))
    N_uw[:, offs[-2]:offs[-1]] = net.weights[-1]
    N_vx = np.zeros((n_phi, n_x))
    N_vx[: sizes[0], :] = net.weights[0]
    N_vw = np.zeros((n_phi, n_phi))
    for i in range(1, len(sizes)):
        N_vw[offs[i]:offs[i + 1], offs[i - 1]:offs[i]] = net.weights[i]
    b_v = np.concatenate(net.biases[:-1])
    return StackedForm(N_ux, N_uw, N_vx, N_vw, net.biases[-1].copy(), b_v, tuple(sizes))


@dataclass(frozen=True)
class TransformedForm:
    N_ux: np.ndarray
    N_uz: np.ndarray
    N_vx: np.ndarray
    N_vz: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    C3: np.ndarray
    C4: np.ndarray
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_z(self):
        return self.N_uz.shape[1]


def neumann_inverse(C, order=None):
    """``(I - C)^{-1}`` for nilpotent ``C`` as the finite series ``sum_k C^k``."""
    n = C.shape[0]
    order = n if order is None else order
    out = np.eye(n)
    term = np.eye(n)
    for _ in range(1, max(order, 1)):
        term = term @ C
        if not term.any():
            break
        out = out + term
    return out


def loop_transform(stacked, sectors, drop_affine=True):
    """Normalise every neuron's sector ``[alpha, beta]`` to ``[-1, 1]``.

    With ``w = (a+b)/2 v + (b-a)/2 z`` the map ``z = phi~(v)`` satisfies
    ``|z| <= |v|`` element-wise.  Neurons with ``alpha == beta`` are exactly
    affine; with ``drop_affine`` they are removed from ``z`` and ``v``.
    """
    alpha = np.asarray(sectors.alpha, float)
    beta = np.asarray(sectors.beta, float)
    if alpha.shape != (stacked.n_phi,) or beta.shape != (stacked.n_phi,):
        raise DimensionError("sector vectors must have one entry per neuron")
    if np.any(alpha > beta):
        bad = int(np.argmax(alpha > beta))
        raise SectorError(f"neuron {bad}: alpha={alpha[bad]} exceeds beta={beta[bad]}")
    half_width = np.diag((beta - alpha) / 2.0)
    mid = np.diag((alpha + beta) / 2.0)
    C1 = stacked.N_uw @ half_width
    C2 = stacked.N_uw @ mid
    C3 = stacked.N_vw @ half_width
    C4 = stacked.N_vw @ mid
    n_layers = max(len(stacked.layer_sizes), 1)
    inv = neumann_inverse(C4, n_layers)
    N_ux = stacked.N_ux + C2 @ inv @ stacked.N_vx
    N_uz = C1 + C2 @ inv @ C3
    N_vx = inv @ stacked.N_vx
    N_vz = inv @ C3
    kept = np.arange(stacked.n_phi)
    if drop_affine:
        kept = np.flatnonzero(beta > alpha)
        N_uz = N_uz[:, kept]
        N_vx = N_vx[kept, :]
        N_vz = N_vz[np.ix_(kept, kept)]
    return TransformedForm(N_ux, N_uz, N_vx, N_vz, C1, C2, C3, C4, kept)


def normalized_activation(v, w, alpha, beta):
    """``z`` with ``w = (a+b)/2 v + (b-a)/2 z`` (entries with ``a == b`` give 0)."""
    v, w = np.asarray(v, float), np.asarray(w, float)
    width = np.asarray(beta, float) - np.asarray(alpha, float)
    mid = (np.asarray(alpha, float) + np.asarray(beta, float)) / 2.0
    safe = np.where(width > 0, width, 1.0)
    return np.where(width > 0, 2.0 / safe * (w - mid * v), 0.0)


def equilibrium_offsets(net, sectors):
    """Residual biases when the network is written around its sector centres.

    In deviation variables ``v - v*``, ``w - w*`` the network is affine-free
    exactly when all returned vectors vanish, i.e. ``x = 0`` maps to
    ``v = v*``, ``w = w*`` and ``u = 0``.
    """
    sizes = net.layer_sizes
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    v_star = np.asarray(sectors.v_star, float)
    w_star = np.asarray(sectors.w_star, float)
    prev = np.zeros(net.n_x)
    layer_offsets = []
    for i, (W, b) in enumerate(zip(net.weights[:-1], net.biases[:-1])):
        layer_offsets.append(W @ prev + b - v_star[offs[i]:offs[i + 1]])
        prev = w_star[offs[i]:offs[i + 1]]
    u_offset = net.weights[-1] @ prev + net.biases[-1]
    v_offset = np.concatenate(layer_offsets) if layer_offsets else np.zeros(0)
    return u_offset, v_offset


def check_equilibrium(net, sectors, tol=1e-9):
    u_off, v_off = equilibrium_offsets(net, sectors)
    worst = max(np.abs(u_off).max(initial=0.0), np.abs(v_off).max(initial=0.0))
    if worst > tol:
        raise EquilibriumError(
            f"network bias moves the equilibrium away from the sector centres "
            f"(max offset {worst:.3e} > {tol:.1e}); stability is only certified for pi(0) = 0"
        )
    return worst
