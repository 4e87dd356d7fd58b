"""Metric-based feedback control, closed-loop simulation, and an LQR baseline.

The regulation law is u = -B1(x,t)' M(x,t) x.  For tracking, the same
gain acts on the deviation from a nominal plan and the nominal input is
added as feedforward:

    u(t) = u_nom(t) - B1(x,t)' M(x,t) (x - x_d(t))

followed by an optional box clamp.  The nominal trajectory is re-flowed
inside the closed-loop simulation with the same integrator as the
perturbed run, so the tube deviation x - x_d is measured against the
exact nominal flow of the plan's inputs rather than an interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .dynamics import IntegrationDivergedError, Trajectory, rk4_step
from .metric import NotPositiveDefiniteError, is_positive_definite


def ncm_controller(sys, source, clamp=None):
    """Regulation policy u(x, t) = -B1' M x with an optional box clamp."""
    if sys.B1 is None:
        raise ValueError(f"system {sys.name!r} has no control input channel")

    def policy(x, t=0.0):
        x = np.asarray(x, dtype=float)
        M = np.asarray(source.metric(x, t), dtype=float)
        if not is_positive_definite(M):
            raise NotPositiveDefiniteError("controller metric is not positive definite")
        u = -sys.B1(x, t).T @ M @ x
        if clamp is not None:
            u = np.clip(u, clamp[0], clamp[1])
        return u

    return policy


@dataclass
class ControlRun:
    """Closed-loop tracking run against a nominal plan."""

    nominal_trajectory: Trajectory
    perturbed_trajectory: Trajectory
    inputs: np.ndarray
    effort: float
    tube: Optional[float]
    deviations: np.ndarray
    violations: np.ndarray
    clearances: Optional[np.ndarray]
    input_min: float
    input_max: float
    tag: str

    @property
    def times(self):
        return self.nominal_trajectory.times

    def max_deviation(self, t_start=0.0):
        mask = self.times >= t_start
        return float(self.deviations[mask].max())

    def violation_count(self, t_start=0.0):
        if self.tube is None:
            return 0
        mask = self.times >= t_start
        return int(np.count_nonzero(self.violations[mask]))

    def to_csv(self, path):
        times = self.times
        xd = self.nominal_trajectory.states
        xs = self.perturbed_trajectory.states
        n, m = xd.shape[1], self.inputs.shape[1]
        header = ("t," + ",".join(f"xd{i}" for i in range(n)) + ","
                  + ",".join(f"x{i}" for i in range(n)) + ","
                  + ",".join(f"u{i}" for i in range(m)) + ",deviation,violation")
        rows = np.column_stack([times, xd, xs, self.inputs, self.deviations,
                                self.violations.astype(float)])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def summary(self):
        out = {
            "tag": self.tag,
            "effort": self.effort,
            "max_deviation": float(self.deviations.max()),
            "input_min": self.input_min,
            "input_max": self.input_max,
            "violations": int(np.count_nonzero(self.violations)),
        }
        if self.clearances is not None:
            out["min_clearance"] = float(self.clearances.min())
        return out


def obstacle_clearances(states, obstacles):
    """Per-row min over obstacles of distance(center) - radius, using the
    first two state components as the position."""
    obstacles = np.asarray(obstacles, dtype=float)
    pos = states[:, :2]
    d = np.linalg.norm(pos[:, None, :] - obstacles[None, :, :2], axis=2)
    return (d - obstacles[None, :, 2]).min(axis=1)


def simulate_control(sys, plan, gain_source, d_signal, tube=None, obstacles=None,
                     clamp=(0.0, 1.0), substeps=2, x0=None):
    """Track a nominal plan under disturbances and score the tube.

    gain_source is either a metric source (feedback -B1'M e) or a fixed
    gain matrix K (feedback -K e, tag "lqr").  The disturbance enters
    through the system's B channel; inputs are clamped to the given box
    after the feedback law (pass clamp=None to disable).  The feedback is
    re-evaluated every substep; the metric is looked up once per outer
    step at the current state.
    """
    if sys.B1 is None:
        raise ValueError(f"system {sys.name!r} has no control input channel")
    if plan.inputs is None:
        raise ValueError("plan carries no inputs")
    fixed_gain = not hasattr(gain_source, "metric")
    if fixed_gain:
        K = np.asarray(gain_source, dtype=float)
        tag = "lqr"
    else:
        gain_source.reset()
        tag = gain_source.tag

    times = plan.times
    dt = plan.dt
    N = plan.n_steps
    xd = np.asarray(plan.states[0], dtype=float).copy()
    x = xd.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    xds = np.empty((N + 1, sys.n))
    xs = np.empty((N + 1, sys.n))
    us = np.empty((N + 1, sys.m))
    xds[0], xs[0] = xd, x
    u_lo = np.inf
    u_hi = -np.inf

    for i in range(N):
        t = times[i]
        u_nom = plan.inputs[i]
        d = np.zeros(sys.B(x, t).shape[1]) if d_signal is None else np.asarray(d_signal(t))
        if not fixed_gain:
            M = np.asarray(gain_source.metric(x, t), dtype=float)
            if not is_positive_definite(M):
                raise NotPositiveDefiniteError("controller metric is not positive definite")

        h = dt / substeps
        u_rec = None
        for j in range(substeps):
            tj = t + j * h
            e = x - xd
            u = u_nom - (K @ e if fixed_gain else sys.B1(x, tj).T @ M @ e)
            if clamp is not None:
                u = np.clip(u, clamp[0], clamp[1])
            if u_rec is None:
                u_rec = u
            u_lo = min(u_lo, float(u.min()))
            u_hi = max(u_hi, float(u.max()))

            def pert_rhs(xc, tc, u=u, d=d):
                return sys.f(xc, tc) + sys.B1(xc, tc) @ u + sys.B(xc, tc) @ d

            def nom_rhs(xc, tc, u=u_nom):
                return sys.f(xc, tc) + sys.B1(xc, tc) @ u

            x = rk4_step(pert_rhs, x, tj, h)
            xd = rk4_step(nom_rhs, xd, tj, h)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xd))):
            raise IntegrationDivergedError(i, t + dt)
        xs[i + 1], xds[i + 1] = x, xd
        us[i] = u_rec
    us[N] = us[N - 1]

    deviations = np.linalg.norm(xs - xds, axis=1)
    violations = deviations > tube if tube is not None else np.zeros(N + 1, dtype=bool)
    clearances = obstacle_clearances(xs, obstacles) if obstacles is not None else None
    sq = np.sum(us ** 2, axis=1)
    effort = float(dt * (sq.sum() - 0.5 * (sq[0] + sq[-1])))
    return ControlRun(
        nominal_trajectory=Trajectory(times=times, states=xds, inputs=plan.inputs),
        perturbed_trajectory=Trajectory(times=times, states=xs, inputs=us),
        inputs=us, effort=effort, tube=tube, deviations=deviations,
        violations=violations, clearances=clearances,
        input_min=u_lo, input_max=u_hi, tag=tag)


# ---------------------------------------------------------------------------
# LQR baseline


def lqr_gain(A, B, Q, R, tol=1e-10, max_iter=60):
    """Optimal state-feedback gain K = R^-1 B' P for the continuous ARE.

    A stabilizing seed is taken from the stable invariant subspace of the
    Hamiltonian matrix (ordered real Schur form) and refined by
    Newton-Kleinman iteration, each step solving one Lyapunov equation.
    The returned gain satisfies the ARE to residual 1e-8.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = A.shape[0]
    Rinv_Bt = np.linalg.solve(R, B.T)
    H = np.block([[A, -B @ Rinv_Bt], [-Q, -A.T]])
    T, Z, sdim = scipy.linalg.schur(H, sort="lhp")
    if sdim != n:
        raise ValueError("pair (A, B) appears not stabilizable: Hamiltonian has "
                         f"{sdim} stable eigenvalues, expected {n}")
    X, Y = Z[:n, :n], Z[n:, :n]
    if np.linalg.matrix_rank(X) < n:
        raise ValueError("pair (A, B) appears not stabilizable: stable subspace "
                         "basis is singular")
    P = Y @ np.linalg.solve(X.T @ X, X.T)  # least-squares inverse guards conditioning
    P = 0.5 * (P + P.T)

    def residual(P):
        return A.T @ P + P @ A - P @ B @ Rinv_Bt @ P + Q

    for _ in range(max_iter):
        K = Rinv_Bt @ P
        Acl = A - B @ K
        if np.max(np.linalg.eigvals(Acl).real) >= 0:
            raise ValueError("Newton-Kleinman iterate lost stability; "
                             "pair (A, B) may not be stabilizable")
        P_next = scipy.linalg.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P_next))):
            P = P_next
            break
        P = P_next
    res = np.max(np.abs(residual(P)))
    if res > 1e-8 * max(1.0, np.max(np.abs(P))):
        raise ValueError(f"Riccati iteration did not converge: residual {res:.3g}")
    return Rinv_Bt @ P
