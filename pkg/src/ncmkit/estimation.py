"""State estimation with contraction metrics, plus an EKF baseline.

The metric-based observer is

    x_hat' = f(x_hat) + M(x_hat, t) C' (y - h(x_hat))

Two time-discretization faces:

  * ncm_estimator_step is the sampled-data form: one measurement per
    step, the gain metric and the correction vector frozen at the step
    start (zero-order hold) while RK4 integrates the flow.
  * simulate_estimation co-integrates plant and observer as one ODE with
    one measurement per outer step: y, the disturbances, and the gain
    are sampled at the step start and held, while the innovation against
    the held y stays live.  High optimal gains (nu of order 1e2-1e3)
    make the observer stiff, so the hold interval is subdivided; use
    stable_substeps to pick a safe count from the largest metric
    eigenvalue.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dynamics import IntegrationDivergedError, Trajectory, rk4_step
from .metric import NotPositiveDefiniteError, estimator_bound_series, is_positive_definite


def _as_source(metric_or_source):
    if hasattr(metric_or_source, "metric"):
        return metric_or_source
    from .sources import ConstantMetricSource
    return ConstantMetricSource(metric_or_source)


def stable_substeps(max_gain_eig, dt, target=2.5, floor=10):
    """Substep count keeping dt/substeps * max_gain_eig under `target`
    (inside the real-axis stability interval of RK4)."""
    return max(floor, int(np.ceil(dt * max_gain_eig / target)))


def ncm_estimator_step(sys, metric_or_source, x_hat, y, t, dt, substeps=1):
    """Advance the observer one measurement interval.

    The metric and the correction M C'(y - h(x_hat)) are evaluated once
    at the step start and held; RK4 integrates the flow plus the held
    correction over `substeps` stages.  With y = h(x_hat) the step is
    exactly the unforced dynamics.
    """
    source = _as_source(metric_or_source)
    M = np.asarray(source.metric(x_hat, t), dtype=float)
    if not is_positive_definite(M):
        raise NotPositiveDefiniteError("estimator gain metric is not positive definite")
    y = np.asarray(y, dtype=float)
    corr = M @ sys.C(x_hat, t).T @ (y - sys.h(x_hat, t))

    def rhs(xe, tau):
        return sys.f(xe, tau) + corr

    h = dt / substeps
    for j in range(substeps):
        x_hat = rk4_step(rhs, x_hat, t + j * h, h)
    return x_hat


class EkfEstimator:
    """Continuous-time extended Kalman filter stepper.

    The covariance follows P' = AP + PA' + Q - P C' R^-1 C P and is
    integrated alongside the estimate: forward Euler for P (symmetrized
    every step), RK4 for x_hat, on the same substep grid, with the gain
    P C' R^-1 refreshed from the current covariance at each substep.
    If P ever stops being positive definite it is reset to a scaled
    identity and a warning is issued.
    """

    tag = "ekf"

    def __init__(self, sys, Q, R, P0=None):
        self.sys = sys
        self.Q = np.asarray(Q, dtype=float)
        self.R = np.asarray(R, dtype=float)
        if not (is_positive_definite(self.Q) and is_positive_definite(self.R)):
            raise ValueError("EKF weight matrices Q and R must be positive definite")
        self.P0 = np.eye(sys.n) if P0 is None else np.asarray(P0, dtype=float)
        self.reset()

    def reset(self):
        self.P = self.P0.copy()
        self.resets = 0

    def gain(self, x_hat, t):
        C = self.sys.C(x_hat, t)
        return self.P @ C.T @ np.linalg.inv(self.R)

    def advance_covariance(self, x_hat, t, dt):
        """One forward-Euler step of the covariance Riccati flow with
        the linearization frozen at x_hat, then symmetrization."""
        A = self.sys.A(x_hat, t)
        C = self.sys.C(x_hat, t)
        Rinv_C = np.linalg.solve(self.R, C)
        P = self.P
        Pdot = A @ P + P @ A.T + self.Q - P @ C.T @ Rinv_C @ P
        P = P + dt * Pdot
        P = 0.5 * (P + P.T)
        if not is_positive_definite(P):
            scale = max(np.trace(np.abs(P)) / self.sys.n, 1.0)
            warnings.warn(f"EKF covariance lost positive definiteness at t={t:.3f}; "
                          f"reset to {scale:.3g} * identity")
            P = scale * np.eye(self.sys.n)
            self.resets += 1
        self.P = P

    def step(self, x_hat, y, t, dt, substeps=1):
        """Advance the estimate one measurement interval (y held), the
        covariance Euler-stepping in lockstep with the RK4 substeps."""
        sys = self.sys
        y = np.asarray(y, dtype=float)
        h = dt / substeps
        for j in range(substeps):
            K = self.gain(x_hat, t + j * h)

            def rhs(xe, tau):
                return sys.f(xe, tau) + K @ (y - sys.h(xe, tau))

            x_prev = x_hat
            x_hat = rk4_step(rhs, x_hat, t + j * h, h)
            self.advance_covariance(x_prev, t + j * h, h)
        return x_hat


@dataclass
class EstimationRun:
    """Co-integrated plant/observer run with its error bound."""

    true_trajectory: Trajectory
    estimate_trajectory: Trajectory
    errors: np.ndarray
    bound: np.ndarray
    tag: str
    covariance_resets: int = 0

    @property
    def times(self):
        return self.true_trajectory.times

    def smoothed_errors(self, window=15):
        return moving_average(self.errors, window)

    def steady_state_error(self, t_start, window=15):
        sm = self.smoothed_errors(window)
        mask = self.times >= t_start
        if not np.any(mask):
            raise ValueError("steady-state window starts after the run ends")
        return float(sm[mask].mean())

    def to_csv(self, path):
        times = self.times
        xs = self.true_trajectory.states
        xh = self.estimate_trajectory.states
        n = xs.shape[1]
        header = ("t," + ",".join(f"x{i}" for i in range(n)) + ","
                  + ",".join(f"xhat{i}" for i in range(n)) + ",error,bound")
        rows = np.column_stack([times, xs, xh, self.errors, self.bound])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def summary(self):
        return {
            "tag": self.tag,
            "final_error": float(self.errors[-1]),
            "max_error": float(self.errors.max()),
            "ss_bound": float(self.bound[-1]),
            "covariance_resets": self.covariance_resets,
        }


def moving_average(series, window=15):
    """Centered moving average; the window shrinks near the edges."""
    series = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be at least 1")
    out = np.empty_like(series)
    half = window // 2
    for i in range(series.size):
        lo = max(0, i - half)
        hi = min(series.size, i + half + 1)
        out[i] = series[lo:hi].mean()
    return out


def simulate_estimation(sys, source, x0, x_hat0, d1_signal, d2_signal, dt, n_steps,
                        bound_params=None, substeps=10, t0=0.0):
    """Run plant and observer side by side and score the error.

    The plant sees process disturbance d1 through B; the observer sees
    one measurement y = h(x) + G d2 per outer step, held over the step
    while its innovation against the live estimate drives the
    correction.  source is a metric source (gain frozen per outer step)
    or an EkfEstimator, whose covariance Euler-steps on the substep
    grid alongside the estimate.  bound_params, when given, is a dict
    with chi, nu, gamma (and optionally d1_max/d2_max overriding the
    system's bounds) used to evaluate the exponential error-bound
    series.
    """
    x = np.asarray(x0, dtype=float).copy()
    xh = np.asarray(x_hat0, dtype=float).copy()
    is_ekf = isinstance(source, EkfEstimator)
    if not is_ekf:
        source = _as_source(source)
    source.reset()
    times = t0 + dt * np.arange(n_steps + 1)
    xs = np.empty((n_steps + 1, sys.n))
    xhs = np.empty((n_steps + 1, sys.n))
    xs[0], xhs[0] = x, xh
    n = sys.n

    for i in range(n_steps):
        t = times[i]
        d1 = np.zeros(sys.B(x, t).shape[1]) if d1_signal is None else np.asarray(d1_signal(t))
        d2 = np.zeros(sys.G(x, t).shape[1]) if d2_signal is None else np.asarray(d2_signal(t))
        y = sys.h(x, t) + sys.G(x, t) @ d2
        K = None
        if not is_ekf:
            M = np.asarray(source.metric(xh, t), dtype=float)
            if not is_positive_definite(M):
                raise NotPositiveDefiniteError(
                    "estimator gain metric is not positive definite")

        def joint_rhs(z, tau):
            xp, xe = z[:n], z[n:]
            innov = y - sys.h(xe, tau)
            gain = K @ innov if is_ekf else M @ sys.C(xe, tau).T @ innov
            return np.concatenate([sys.f(xp, tau) + sys.B(xp, tau) @ d1,
                                   sys.f(xe, tau) + gain])

        z = np.concatenate([x, xh])
        h = dt / substeps
        for j in range(substeps):
            if is_ekf:
                K = source.gain(z[n:], t + j * h)
            xh_prev = z[n:].copy()
            z = rk4_step(joint_rhs, z, t + j * h, h)
            if is_ekf:
                source.advance_covariance(xh_prev, t + j * h, h)
        x, xh = z[:n].copy(), z[n:].copy()
        if not np.all(np.isfinite(z)):
            raise IntegrationDivergedError(i, t + dt)
        xs[i + 1], xhs[i + 1] = x, xh

    errors = np.linalg.norm(xs - xhs, axis=1)
    if bound_params is not None:
        bp = dict(bound_params)
        b = sys.bounds
        bound = estimator_bound_series(
            times, errors[0],
            bp.get("d1_max", b.d1_max), bp.get("d2_max", b.d2_max),
            bp["chi"], bp["nu"], bp["gamma"],
            b_max=b.b_max, c_max=b.c_max, g_max=b.g_max)
    else:
        bound = np.full_like(times, np.nan)

    return EstimationRun(
        true_trajectory=Trajectory(times=times, states=xs),
        estimate_trajectory=Trajectory(times=times, states=xhs),
        errors=errors, bound=bound, tag=getattr(source, "tag", "constant"),
        covariance_resets=getattr(source, "resets", 0))
