"""Dynamical system models and fixed-step trajectory integration.

Every model carries its vector field together with analytic Jacobians and
the disturbance channel matrices needed by the metric synthesis and the
online estimator/controller.  Systems are immutable once built and safe to
share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray
MatFun = Callable[[Array, float], Array]


class IntegrationDivergedError(RuntimeError):
    """Raised when a state stops being finite during integration."""

    def __init__(self, step, t):
        self.step = step
        self.t = t
        super().__init__(f"integration diverged at step {step} (t={t:g})")


@dataclass(frozen=True)
class Bounds:
    """Known sup-norm bounds of the disturbance channels.

    d1_max / d2_max bound the process / measurement disturbance signals,
    d_max the generic additive disturbance, and b_max, b2_max, c_max,
    g_max bound the induced 2-norms of B, B2, C, G over the state space.
    """

    d1_max: float = 0.0
    d2_max: float = 0.0
    d_max: float = 0.0
    b_max: float = 1.0
    b2_max: float = 1.0
    c_max: float = 1.0
    g_max: float = 1.0


@dataclass(frozen=True)
class DynamicalSystem:
    """A nonlinear system  xdot = f(x,t) + B1(x,t) u + B(x,t) d1,
    y = h(x,t) + G(x,t) d2.

    A(x,t) is the Jacobian of f, C(x,t) the Jacobian of h.  sdc_A, when
    present, is a state-dependent coefficient factorization satisfying
    sdc_A(x,t) @ x == f(x,t), required by the controller synthesis.
    """

    name: str
    n: int
    m: int
    p: int
    f: MatFun
    A: MatFun
    h: MatFun
    C: MatFun
    B: MatFun
    G: MatFun
    B1: Optional[MatFun] = None
    sdc_A: Optional[MatFun] = None
    bounds: Bounds = field(default_factory=Bounds)


@dataclass
class Trajectory:
    """States (and optionally inputs / disturbances) on a uniform time grid."""

    times: Array
    states: Array
    inputs: Optional[Array] = None
    disturbances: Optional[Array] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("times must be a 1-d grid with at least 2 points")
        steps = np.diff(self.times)
        if np.any(steps <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("times must be uniformly spaced")
        if self.states.shape[0] != self.times.size:
            raise ValueError("states row count must match times length")
        for name in ("inputs", "disturbances"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape[0] != self.times.size:
                    raise ValueError(f"{name} row count must match times length")
                setattr(self, name, arr)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def to_csv(self, path):
        """Write `t,x0,...[,u0,...][,d0,...]` rows with 17 significant digits."""
        cols = [self.times[:, None], self.states]
        header = ["t"] + [f"x{i}" for i in range(self.states.shape[1])]
        if self.inputs is not None:
            cols.append(self.inputs)
            header += [f"u{i}" for i in range(self.inputs.shape[1])]
        if self.disturbances is not None:
            cols.append(self.disturbances)
            header += [f"d{i}" for i in range(self.disturbances.shape[1])]
        data = np.hstack(cols)
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in data:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        nx = sum(1 for c in header if c.startswith("x"))
        nu = sum(1 for c in header if c.startswith("u"))
        nd = sum(1 for c in header if c.startswith("d"))
        t = data[:, 0]
        x = data[:, 1:1 + nx]
        u = data[:, 1 + nx:1 + nx + nu] if nu else None
        d = data[:, 1 + nx + nu:1 + nx + nu + nd] if nd else None
        return cls(t, x, u, d)


# ---------------------------------------------------------------------------
# shipped systems


def make_lorenz(d1_max=np.sqrt(3.0), d2_max=1.0) -> DynamicalSystem:
    """Lorenz oscillator (sigma=10, beta=8/3, rho=28) with scalar output x1."""
    sigma, beta, rho = 10.0, 8.0 / 3.0, 28.0

    def f(x, t):
        return np.array([
            sigma * (x[1] - x[0]),
            x[0] * (rho - x[2]) - x[1],
            x[0] * x[1] - beta * x[2],
        ])

    def A(x, t):
        return np.array([
            [-sigma, sigma, 0.0],
            [rho - x[2], -1.0, -x[0]],
            [x[1], x[0], -beta],
        ])

    C_mat = np.array([[1.0, 0.0, 0.0]])

    return DynamicalSystem(
        name="lorenz", n=3, m=0, p=1,
        f=f, A=A,
        h=lambda x, t: C_mat @ x,
        C=lambda x, t: C_mat.copy(),
        B=lambda x, t: np.eye(3),
        G=lambda x, t: np.eye(1),
        bounds=Bounds(d1_max=d1_max, d2_max=d2_max, d_max=d1_max,
                      b_max=1.0, b2_max=1.0, c_max=1.0, g_max=1.0),
    )


# Body-frame thruster table for the planar spacecraft stand-in: a unit
# square body with two unidirectional unit-force thrusters per face,
# mounted at lever arm 0.5 so each pair can produce pure force or torque.
# Columns are (Fx, Fy, torque).
_THRUSTERS = np.array([
    [1.0, 0.0, -0.5],
    [1.0, 0.0, +0.5],
    [-1.0, 0.0, +0.5],
    [-1.0, 0.0, -0.5],
    [0.0, 1.0, +0.5],
    [0.0, 1.0, -0.5],
    [0.0, -1.0, -0.5],
    [0.0, -1.0, +0.5],
]).T


def make_spacecraft(d_max=0.15) -> DynamicalSystem:
    """Planar spacecraft: x = [px, py, phi, vx, vy, phidot], 8 thrusters.

    Mass and inertia are 1.  The drift is the double integrator A @ x; the
    actuation matrix rotates the body-frame thruster forces by the yaw phi.
    """
    A_mat = np.zeros((6, 6))
    A_mat[0, 3] = A_mat[1, 4] = A_mat[2, 5] = 1.0

    def B1(x, t):
        phi = x[2]
        c, s = np.cos(phi), np.sin(phi)
        out = np.zeros((6, 8))
        out[3] = c * _THRUSTERS[0] - s * _THRUSTERS[1]
        out[4] = s * _THRUSTERS[0] + c * _THRUSTERS[1]
        out[5] = _THRUSTERS[2]
        return out

    return DynamicalSystem(
        name="spacecraft", n=6, m=8, p=6,
        f=lambda x, t: A_mat @ x,
        A=lambda x, t: A_mat.copy(),
        h=lambda x, t: x.copy(),
        C=lambda x, t: np.eye(6),
        B=lambda x, t: np.eye(6),
        G=lambda x, t: np.eye(6),
        B1=B1,
        sdc_A=lambda x, t: A_mat.copy(),
        bounds=Bounds(d1_max=d_max, d2_max=0.0, d_max=d_max,
                      b_max=1.0, b2_max=1.0, c_max=1.0, g_max=1.0),
    )


def make_linear_test(a, d_max=1.0) -> DynamicalSystem:
    """Scalar system xdot = a*x + u + d with full-state measurement."""

    return DynamicalSystem(
        name=f"linear:{a:g}", n=1, m=1, p=1,
        f=lambda x, t: a * x,
        A=lambda x, t: np.array([[a]]),
        h=lambda x, t: x.copy(),
        C=lambda x, t: np.eye(1),
        B=lambda x, t: np.eye(1),
        G=lambda x, t: np.eye(1),
        B1=lambda x, t: np.eye(1),
        sdc_A=lambda x, t: np.array([[a]]),
        bounds=Bounds(d1_max=d_max, d2_max=d_max, d_max=d_max),
    )


def get_system(name) -> DynamicalSystem:
    """Resolve a system by CLI name: lorenz, spacecraft, or linear:<a>."""
    if name == "lorenz":
        return make_lorenz()
    if name == "spacecraft":
        return make_spacecraft()
    if name.startswith("linear:"):
        return make_linear_test(float(name.split(":", 1)[1]))
    raise ValueError(f"unknown system {name!r}")


# ---------------------------------------------------------------------------
# integration


def rk4_step(field, x, t, dt):
    """One classical 4th-order Runge-Kutta step of xdot = field(x, t)."""
    k1 = field(x, t)
    k2 = field(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(x + dt * k3, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(system, x0, u_policy=None, d_signal=None, dt=0.1, n_steps=100,
              t0=0.0, substeps=1) -> Trajectory:
    """Integrate the closed loop xdot = f + B1 u + B d with RK4.

    Inputs and disturbances are sampled zero-order-hold at the grid points;
    `substeps` RK4 sub-intervals are taken per grid step (the returned
    trajectory is always on the outer grid).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")

    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.n,):
        raise ValueError(f"x0 must have shape ({system.n},)")

    times = t0 + dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, system.n))
    states[0] = x
    inputs = np.zeros((n_steps + 1, system.m)) if u_policy is not None else None
    dists = None

    h = dt / substeps
    for k in range(n_steps):
        t = times[k]
        drive = np.zeros(system.n)
        if u_policy is not None:
            u = np.atleast_1d(np.asarray(u_policy(x, t), dtype=float))
            inputs[k] = u
            drive = drive + system.B1(x, t) @ u
        if d_signal is not None:
            d = np.atleast_1d(np.asarray(d_signal(t), dtype=float))
            if dists is None:
                dists = np.zeros((n_steps + 1, d.size))
            dists[k] = d
            drive = drive + system.B(x, t) @ d

        def field(xx, tt, drive=drive):
            return system.f(xx, tt) + drive

        for j in range(substeps):
            x = rk4_step(field, x, t + j * h, h)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(k + 1, times[k + 1])
        states[k + 1] = x

    if inputs is not None:
        inputs[n_steps] = inputs[n_steps - 1]
    if dists is not None:
        dists[n_steps] = dists[n_steps - 1]
    return Trajectory(times, states, inputs, dists)


def finite_difference_jacobian(fun, x, t, eps=1e-6):
    """Central-difference Jacobian of fun(x, t) with respect to x."""
    x = np.asarray(x, dtype=float)
    y0 = np.atleast_1d(fun(x, t))
    J = np.zeros((y0.size, x.size))
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = eps
        J[:, j] = (np.atleast_1d(fun(x + dx, t)) - np.atleast_1d(fun(x - dx, t))) / (2 * eps)
    return J


def ball_disturbance(k, scale, seed):
    """ZOH disturbance: a fresh random unit vector times `scale` at each new
    grid time, so the sup norm bound is attained exactly.  Deterministic for
    a given seed; repeated queries at the same time return the same draw."""

    rng = np.random.default_rng(seed)
    cache = {}

    def signal(t):
        key = round(t, 9)
        if key not in cache:
            v = rng.standard_normal(k)
            nrm = np.linalg.norm(v)
            while nrm < 1e-12:
                v = rng.standard_normal(k)
                nrm = np.linalg.norm(v)
            cache[key] = scale * v / nrm
        return cache[key]

    return signal
