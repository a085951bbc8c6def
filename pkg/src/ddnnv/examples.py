"""Bundled example systems: toy loops, a vehicle-like lateral model and the pendulum.

None of the plants here is secret to the verifiers; they exist to generate
trajectory data and to act as ground truth in tests.  The vehicle fixture is
a structurally similar stand-in with constants chosen in this repository, not
a reproduction of any published experiment.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.optimize import nnls

from .data import OraclePlant, TrajectoryData, collect
from .nn import NeuralNetwork
from .reach import Polytope

FIT_TOL = 1e-3


@dataclass(frozen=True)
class PendulumExample:
    """Damped pendulum ``theta'' = 3g/(2l) sin(theta) - k omega + 3/(m l^2) u``.

    ``x_star`` is the nominal operating point as usually quoted; deviation
    coordinates are taken around the exact equilibrium ``(pi, 0)`` nearest to
    it, otherwise the residual ``sin(3.14)`` acts as an input-free drift that
    no linear model ``x+ = A x + B u`` can explain.
    """

    k: float = 0.8
    g: float = 10.0
    l: float = 1.0
    m: float = 1.0
    dt: float = 0.02
    x_star: tuple = (3.14, 0.0)

    @property
    def equilibrium(self):
        theta = math.pi * round(self.x_star[0] / math.pi)
        return np.array([theta, 0.0])

    def rhs(self, x, u):
        theta, omega = x
        return np.array([
            omega,
            1.5 * self.g / self.l * math.sin(theta) - self.k * omega + 3.0 / (self.m * self.l ** 2) * u,
        ])

    def step(self, x, u, method="euler"):
        h = self.dt
        if method == "euler":
            return x + h * self.rhs(x, u)
        if method == "rk4":
            k1 = self.rhs(x, u)
            k2 = self.rhs(x + h / 2 * k1, u)
            k3 = self.rhs(x + h / 2 * k2, u)
            k4 = self.rhs(x + h * k3, u)
            return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        raise ValueError(f"unknown integration method {method!r}")

    def linearization(self):
        """Euler discretisation of the Jacobian at the equilibrium."""
        theta = self.equilibrium[0]
        J = np.array([[0.0, 1.0], [1.5 * self.g / self.l * math.cos(theta), -self.k]])
        Bc = np.array([[0.0], [3.0 / (self.m * self.l ** 2)]])
        return OraclePlant(np.eye(2) + self.dt * J, self.dt * Bc)


def pendulum_data(seed=0, K=5, method="euler", example=None, input_bound=0.01,
                  theta_box=(3.13, 3.15), omega_box=(-0.01, 0.01)):
    """One short open-loop rollout of the pendulum, in deviation coordinates."""
    ex = example or PendulumExample()
    rng = np.random.default_rng(seed)
    x = np.array([rng.uniform(*theta_box), rng.uniform(*omega_box)])
    x_eq = ex.equilibrium
    U0, X0, X1 = np.empty((1, K)), np.empty((2, K)), np.empty((2, K))
    for k in range(K):
        u = rng.uniform(-input_bound, input_bound)
        x_next = ex.step(x, u, method)
        U0[0, k], X0[:, k], X1[:, k] = u, x - x_eq, x_next - x_eq
        x = x_next
    prov = {"example": "pendulum", "seed": seed, "K": K, "method": method, "noise": False}
    return TrajectoryData(U0, X0, X1, prov)


def lqr_gain(plant, q=1.0, r=10.0):
    """Discrete LQR gain ``K`` with ``u = K x`` (sign folded in)."""
    Q = q * np.eye(plant.n_x)
    R = r * np.eye(plant.n_u)
    P = solve_discrete_are(plant.A, plant.B, Q, R)
    return -np.linalg.solve(R + plant.B.T @ P @ plant.B, plant.B.T @ P @ plant.A)


def _grid(n, half_width, points):
    per_dim = max(3, int(round(points ** (1.0 / n))))
    axes = [np.linspace(-half_width, half_width, per_dim)] * n
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)


def fit_example_controller(plant, hidden=16, seed=0, gain=None, half_width=1.0, points=1681, tol=FIT_TOL):
    """Bias-free tanh network imitating a linear gain ``u = K x`` on a state grid.

    ``hidden = 0`` returns the purely linear network.  Otherwise neuron ``j``
    serves output ``j mod n_u``: its input weights are the gain row scaled by
    a seeded random factor, and its output weight is fitted by nonnegative
    least squares.  Aligned, same-signed neurons keep the sector uncertainty
    of the network within ``u = kappa K x`` for ``kappa`` in ``[0, 1]``-ish,
    which is what makes the fitted controller certifiable with global sectors.
    """
    K = lqr_gain(plant) if gain is None else np.atleast_2d(np.asarray(gain, float))
    n_u, n_x = K.shape
    if hidden == 0:
        return NeuralNetwork((K.copy(),), (np.zeros(n_u),), "tanh")
    if hidden < n_u:
        raise ValueError(f"need at least one hidden neuron per output ({n_u})")
    rng = np.random.default_rng(seed)
    X = _grid(n_x, half_width, points)
    owner = np.arange(hidden) % n_u
    W1 = np.zeros((hidden, n_x))
    W2 = np.zeros((n_u, hidden))
    for r in range(n_u):
        idx = np.flatnonzero(owner == r)
        t_max = np.abs(X @ K[r]).max() or 1.0
        # |W1 x| stays below 0.5, where tanh is close to linear
        scales = np.sort(rng.uniform(0.01, 0.5, size=idx.size)) / t_max
        W1[idx] = scales[:, None] * K[r]
        W2[r, idx], _ = nnls(np.tanh(X @ W1[idx].T), X @ K[r])
    net = NeuralNetwork((W1, W2), (np.zeros(hidden), np.zeros(n_u)), "tanh")
    err = float(np.abs(net.batch(X) - X @ K.T).max())
    if err > tol:
        raise ValueError(f"controller fit error {err:.2e} exceeds {tol:.0e}; try a larger hidden size")
    return net


def pendulum_controller(seed=0, hidden=16):
    ex = PendulumExample()
    return fit_example_controller(ex.linearization(), hidden, seed, half_width=0.05)


# ---------------------------------------------------------------------------
# Toy fixtures
# ---------------------------------------------------------------------------

def _relu_net(rng, n_x, n_u, hidden, out_scale):
    W1 = rng.normal(size=(hidden, n_x))
    W2 = out_scale * rng.normal(size=(n_u, hidden))
    return NeuralNetwork((W1, W2), (np.zeros(hidden), np.zeros(n_u)), "relu")


def _rotation(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def vehicle_plant(dt=0.1):
    """Pre-stabilised lateral error dynamics ``[e, e_dot, psi, psi_dot]``.

    A bicycle model at constant speed, Euler-discretised, with a fixed
    baseline steering feedback folded into ``A`` so that the open loop is
    Schur stable; the network adds a correction on top.
    """
    m, Iz, lf, lr, Cf, Cr, vx = 1573.0, 2873.0, 1.1, 1.58, 80000.0, 80000.0, 30.0
    Ac = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(Cf + Cr) / (m * vx), (Cf + Cr) / m, (-Cf * lf + Cr * lr) / (m * vx)],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -(Cf * lf - Cr * lr) / (Iz * vx), (Cf * lf - Cr * lr) / Iz,
         -(Cf * lf ** 2 + Cr * lr ** 2) / (Iz * vx)],
    ])
    Bc = np.array([[0.0], [Cf / m], [0.0], [Cf * lf / Iz]])
    A = np.eye(4) + dt * Ac
    B = dt * Bc
    K0 = lqr_gain(OraclePlant(A, B), q=1.0, r=1.0)
    return OraclePlant(A + B @ K0, B)


@dataclass(frozen=True)
class Example:
    name: str
    plant: OraclePlant
    net: NeuralNetwork
    data: TrajectoryData
    input_set: Polytope
    safe_set: Polytope
    invariant_set: Polytope
    horizon: int
    description: str = ""

    def problem_dict(self, multiplier_degree=0):
        return {
            "input_set": self.input_set.to_dict(),
            "safe_set": self.safe_set.to_dict(),
            "invariant_set": self.invariant_set.to_dict(),
            "horizon": self.horizon,
            "multiplier_degree": multiplier_degree,
        }

    def write(self, directory):
        """Write ``nn.json``, ``data.csv``, ``sets.json`` and ``plant.json``."""
        os.makedirs(directory, exist_ok=True)
        self.net.save(os.path.join(directory, "nn.json"))
        self.data.save_csv(os.path.join(directory, "data.csv"))
        with open(os.path.join(directory, "sets.json"), "w") as fh:
            json.dump(self.problem_dict(), fh, indent=2, sort_keys=True)
        with open(os.path.join(directory, "plant.json"), "w") as fh:
            json.dump(self.plant.to_dict(), fh, indent=2, sort_keys=True)
        return {k: os.path.join(directory, f) for k, f in
                (("nn", "nn.json"), ("data", "data.csv"), ("sets", "sets.json"), ("plant", "plant.json"))}


def contraction_example(seed=0, K=8):
    rng = np.random.default_rng(seed)
    plant = OraclePlant(0.5 * np.eye(2), np.array([[0.0], [0.1]]))
    net = _relu_net(rng, 2, 1, 4, 0.2)
    data = collect(plant, K, [-1.0, 1.0], [-1.0, 1.0], seed=seed, independent=True)
    unit = Polytope.box([-1, -1], [1, 1])
    return Example(
        "contraction", plant, net, data,
        input_set=Polytope.box([-0.3, -0.3], [0.3, 0.3]),
        safe_set=Polytope.box([-2, -2], [2, 2]),
        invariant_set=unit,
        horizon=3,
        description="contracting 2-state plant with a small ReLU correction",
    )


def safety2d_example(seed=0, K=8):
    rng = np.random.default_rng(seed + 1)
    plant = OraclePlant(0.95 * _rotation(30.0), np.array([[0.0], [0.1]]))
    net = _relu_net(rng, 2, 1, 6, 0.1)
    data = collect(plant, K, [-1.0, 1.0], [-1.0, 1.0], seed=seed, independent=True)
    return Example(
        "safety2d", plant, net, data,
        input_set=Polytope.box([-0.2, -0.2], [0.2, 0.2]),
        safe_set=Polytope.box([-1, -1], [1, 1]),
        invariant_set=Polytope.box([-1, -1], [1, 1]),
        horizon=3,
        description="rotating 2-state plant; box over-approximations grow with k",
    )


VEHICLE_E_BOUND = 0.045


def vehicle_example(seed=0, K=5, hidden=8):
    """Vehicle-like 4-state fixture with a safety instance certified for k = 1, 2 only."""
    rng = np.random.default_rng(seed + 2)
    plant = vehicle_plant()
    net = _relu_net(rng, 4, 1, hidden, 0.002)
    data = collect(plant, K, [-0.05, 0.05], [-0.1, 0.1], seed=seed, independent=True)
    x_in = np.array([0.02, 0.05, 0.01, 0.05])
    safe = np.array([VEHICLE_E_BOUND, 1.0, 0.5, 1.0])
    return Example(
        "vehicle", plant, net, data,
        input_set=Polytope.box(-x_in, x_in),
        safe_set=Polytope.box(-safe, safe),
        invariant_set=Polytope.box(-safe, safe),
        horizon=3,
        description="pre-stabilised lateral dynamics stand-in (not a published plant)",
    )


def pendulum_example(seed=0, K=5):
    ex = PendulumExample()
    plant = ex.linearization()
    net = pendulum_controller(seed)
    data = pendulum_data(seed, K)
    box = Polytope.box([-0.05, -0.05], [0.05, 0.05])
    return Example(
        "pendulum", plant, net, data, box, box, box, 1,
        description="pendulum around its equilibrium; plant entry is the Jacobian oracle",
    )


EXAMPLES = {
    "contraction": contraction_example,
    "safety2d": safety2d_example,
    "vehicle": vehicle_example,
    "pendulum": pendulum_example,
}


def load_example(name, seed=0, **kwargs):
    try:
        factory = EXAMPLES[name]
    except KeyError:
        raise ValueError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}") from None
    return factory(seed=seed, **kwargs)
