"""Contraction metric containers, Cholesky packing, and disturbance bounds.

A metric sample ties a positive definite matrix M to the state (and time)
it was synthesized at.  For learning, M is stored through its upper
Cholesky factor packed row-major into a flat theta vector, which keeps the
regression target unconstrained while guaranteeing M = U^T U is symmetric
positive semidefinite on reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class NotPositiveDefiniteError(ValueError):
    pass


def theta_size(n):
    return n * (n + 1) // 2


def _check_square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    return M


def cholesky_upper(M) -> Array:
    """Upper-triangular U with positive diagonal such that M = U^T U.

    Raises NotPositiveDefiniteError if M is not symmetric positive definite
    (up to a relative tolerance of 1e-12 on the symmetry check).
    """
    M = _check_square(M)
    scale = np.linalg.norm(M)
    if scale > 0 and np.linalg.norm(M - M.T) > 1e-12 * scale:
        raise NotPositiveDefiniteError("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("matrix is not positive definite") from None
    return L.T


_UPPER_IDX = {}


def _upper_indices(n):
    """Row/col index arrays of the upper triangle in row-major order."""
    if n not in _UPPER_IDX:
        _UPPER_IDX[n] = np.triu_indices(n)
    return _UPPER_IDX[n]


def pack_theta(U) -> Array:
    """Flatten an upper-triangular factor row-major into theta.

    theta = (U00, U01, ..., U0{n-1}, U11, ..., U{n-1}{n-1}), length n(n+1)/2.
    """
    U = _check_square(U)
    rows, cols = _upper_indices(U.shape[0])
    return U[rows, cols].copy()


def unpack_theta(theta, n) -> Array:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (theta_size(n),):
        raise ValueError(f"theta must have length {theta_size(n)} for n={n}")
    U = np.zeros((n, n))
    rows, cols = _upper_indices(n)
    U[rows, cols] = theta
    return U


def diag_theta_indices(n) -> Array:
    """Positions of the diagonal entries of U inside the packed theta."""
    i = np.arange(n)
    return i * n - i * (i - 1) // 2


def theta_to_metric(theta, n, min_diag=0.0) -> Array:
    """Reconstruct M = U^T U from packed theta.

    With min_diag > 0 the diagonal of U is clamped below at that value,
    which makes the result strictly positive definite regardless of theta.
    """
    U = unpack_theta(theta, n)
    if min_diag > 0.0:
        diag = U[np.diag_indices(n)]
        U[np.diag_indices(n)] = np.maximum(diag, min_diag)
    return U.T @ U


def metric_from_sample(W_tilde, nu) -> Array:
    """Recover M = nu * W_tilde^{-1} from a scaled dual solution.

    W_tilde is symmetrized before inversion; the result is symmetrized too
    so downstream Cholesky calls never trip on roundoff asymmetry.
    """
    W_tilde = _check_square(W_tilde)
    if nu <= 0:
        raise ValueError("nu must be positive")
    Ws = 0.5 * (W_tilde + W_tilde.T)
    try:
        L = np.linalg.cholesky(Ws)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("W_tilde is not positive definite") from None
    inv = np.linalg.inv(L)
    M = nu * (inv.T @ inv)
    return 0.5 * (M + M.T)


def is_positive_definite(M, rel_tol=1e-12) -> bool:
    """Cholesky-based PD test with an absolute floor of rel_tol * ||M||."""
    M = _check_square(M)
    floor = rel_tol * max(np.linalg.norm(M), 1.0)
    try:
        np.linalg.cholesky(0.5 * (M + M.T) - floor * np.eye(M.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class MetricSample:
    """One synthesized metric: trajectory s, step i, time t, state x, M."""

    s: int
    i: int
    t: float
    x: Array
    M: Array

    def theta(self) -> Array:
        return pack_theta(cholesky_upper(self.M))


@dataclass(frozen=True)
class TubeBound:
    """Steady-state tube data: radius plus the constants it came from."""

    radius: float
    alpha: float
    chi: float
    nu: float
    disturbance: float


def tube_radius(d_max, chi, alpha) -> float:
    """Steady-state tracking tube radius d_max * sqrt(chi) / alpha."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if chi < 1.0:
        raise ValueError("chi is a condition ratio and cannot be below 1")
    return d_max * np.sqrt(chi) / alpha


def estimator_ss_bound(d1_max, d2_max, chi, nu, gamma,
                       b_max=1.0, c_max=1.0, g_max=1.0) -> float:
    """Steady-state estimation error bound
    (d1*b*chi + d2*c*g*nu) / gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return (d1_max * b_max * chi + d2_max * c_max * g_max * nu) / gamma


def estimator_bound_series(times, e0_norm, d1_max, d2_max, chi, nu, gamma,
                           b_max=1.0, c_max=1.0, g_max=1.0) -> Array:
    """Exponentially decaying transient plus the constant steady-state offset.

    The transient amplitude sqrt(chi)*||e0|| upper-bounds the weighted
    initial error; the offset is estimator_ss_bound.
    """
    times = np.asarray(times, dtype=float)
    ss = estimator_ss_bound(d1_max, d2_max, chi, nu, gamma, b_max, c_max, g_max)
    return np.sqrt(chi) * e0_norm * np.exp(-gamma * (times - times[0])) + ss


def controller_objective(d_max, chi, nu, alpha, lam, b2_max=1.0) -> float:
    """Tracking synthesis objective (b2*d/alpha)*chi + lam*nu."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return (b2_max * d_max / alpha) * chi + lam * nu


def tracking_bound_series(times, e0_norm, d_max, chi, alpha, b2_max=1.0) -> Array:
    """Tracking-error envelope with steady state b2*d*sqrt(chi)/alpha."""
    times = np.asarray(times, dtype=float)
    decay = np.exp(-alpha * (times - times[0]))
    return np.sqrt(chi) * e0_norm * decay + b2_max * tube_radius(d_max, chi, alpha)


# ---------------------------------------------------------------------------
# dataset serialization


def save_dataset(path, samples, n):
    """Write metric samples as `s,i,t,x0..,theta0..` CSV rows (17 digits)."""
    k = theta_size(n)
    header = ["s", "i", "t"] + [f"x{j}" for j in range(n)] + [f"theta{j}" for j in range(k)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for smp in samples:
            theta = smp.theta()
            row = [f"{smp.s:d}", f"{smp.i:d}", f"{smp.t:.17g}"]
            row += [f"{v:.17g}" for v in smp.x]
            row += [f"{v:.17g}" for v in theta]
            fh.write(",".join(row) + "\n")


def load_dataset(path):
    """Read a dataset CSV back into (samples, n)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = sum(1 for c in header if c.startswith("x"))
    k = sum(1 for c in header if c.startswith("theta"))
    if k != theta_size(n):
        raise ValueError(f"dataset has {k} theta columns, expected {theta_size(n)}")
    samples = []
    for row in data:
        theta = row[3 + n:3 + n + k]
        M = theta_to_metric(theta, n)
        samples.append(MetricSample(int(row[0]), int(row[1]), float(row[2]),
                                    row[3:3 + n].copy(), M))
    return samples, n
