"""Convex synthesis of contraction metrics along trajectories.

Three problem variants are assembled over a scaled inverse metric
W_tilde = nu * M^{-1} discretized along a precomputed trajectory with a
backward-difference time derivative:

  contraction:  dW - (A W + W A') - 2a W >= 0          minimize (d/a) chi
  estimator:    dW + W A + A' W - 2 nu C'C <= -2a W    minimize (d1 b chi + d2 c g nu)/gamma
  controller:  -dW + A W + W A' - 2 nu B1 B1' <= -2a W minimize (b2 d/a) chi + lam nu

all subject to I <= W_i <= chi I.  The index-0 constraint is imposed
without the difference term (there is no i-1 sample to difference
against).  Metrics are recovered as M_i = nu * W_i^{-1} and emitted as
MetricSample rows for the regression dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .dynamics import DynamicalSystem, Trajectory
from .metric import MetricSample, metric_from_sample, save_dataset
from .sdp import NSD, PSD, Block, MatrixVarFamily, SdpProblem, solve

VARIANTS = ("contraction", "estimator", "controller")


class CvstemError(ValueError):
    pass


class NoFeasibleAlphaError(RuntimeError):
    """Every alpha in the line-search grid failed; statuses maps alpha to
    the solver status observed there."""

    def __init__(self, statuses):
        self.statuses = dict(statuses)
        detail = ", ".join(f"{a:g}:{s}" for a, s in sorted(self.statuses.items()))
        super().__init__(f"no feasible alpha in line-search grid ({detail})")


def _default_alpha_grid():
    # 21 points per decade over [0.1, 10]
    return np.logspace(-1.0, 1.0, 41)


@dataclass
class CvstemConfig:
    variant: str = "estimator"
    alpha_grid: Sequence[float] = field(default_factory=_default_alpha_grid)
    delta_t: float = 0.1
    gamma_ratio: float = 1.0
    lam: float = 0.01
    nu_min: float = 1e-6
    solver_tol: float = 1e-8
    solver_max_iter: int = 200
    chunk: int = 0  # split trajectories into chunks of this many steps (0 = off)
    alpha_fixed: Optional[float] = None  # skip the line search; solve at this rate
    pointwise: bool = False  # with alpha_fixed: static per-state solves

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise CvstemError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        grid = np.asarray(self.alpha_grid, dtype=float)
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise CvstemError("alpha_grid must be nonempty, positive, strictly ascending")
        self.alpha_grid = grid
        if not 0.0 < self.gamma_ratio <= 1.0:
            raise CvstemError("gamma_ratio must lie in (0, 1]")
        if self.lam < 0:
            raise CvstemError("lam must be nonnegative")
        if self.delta_t <= 0:
            raise CvstemError("delta_t must be positive")
        if self.alpha_fixed is not None and self.alpha_fixed <= 0:
            raise CvstemError("alpha_fixed must be positive")
        if self.pointwise and self.alpha_fixed is None:
            raise CvstemError("pointwise solving needs alpha_fixed")


def _check_dt(traj, delta_t):
    if abs(traj.dt - delta_t) > 1e-9 * max(1.0, delta_t):
        raise CvstemError(
            f"delta_t {delta_t:g} does not match trajectory spacing {traj.dt:g}")


def _assemble_points(states, times, sys, variant, alpha, gamma, lam, delta_t,
                     nu_min):
    """Build the SDP for the given variant over explicit sample points.

    A single point yields the static problem (no difference constraints),
    which is what the online pointwise solves use.
    """
    if alpha <= 0:
        raise CvstemError("alpha must be positive")
    n = sys.n
    npts = len(states)
    blocks = []

    if variant == "contraction":
        A = [np.asarray(sys.A(states[i], times[i]), dtype=float) for i in range(npts)]
        for i in range(npts):
            Ai = A[i]
            if i == 0:
                def fn(W, Ai=Ai):
                    return -(Ai @ W + W @ Ai.T) - 2.0 * alpha * W
                blocks.append(Block(f"contract[{i}]", n, PSD, (("W", i),), fn))
            else:
                def fn(W, Wp, Ai=Ai):
                    return (W - Wp) / delta_t - (Ai @ W + W @ Ai.T) - 2.0 * alpha * W
                blocks.append(Block(f"contract[{i}]", n, PSD, (("W", i), ("W", i - 1)), fn))
        scalars = ["chi"]
        objective = {"chi": sys.bounds.d_max / alpha}

    elif variant == "estimator":
        if gamma is None or gamma <= 0:
            raise CvstemError("gamma must be positive")
        A = [np.asarray(sys.A(states[i], times[i]), dtype=float) for i in range(npts)]
        CtC = [np.asarray(sys.C(states[i], times[i]), dtype=float) for i in range(npts)]
        CtC = [c.T @ c for c in CtC]
        for i in range(npts):
            Ai, Qi = A[i], CtC[i]
            if i == 0:
                def fn(W, nu, Ai=Ai, Qi=Qi):
                    return W @ Ai + Ai.T @ W - 2.0 * nu * Qi + 2.0 * alpha * W
                blocks.append(Block(f"observe[{i}]", n, NSD, (("W", i), "nu"), fn))
            else:
                def fn(W, Wp, nu, Ai=Ai, Qi=Qi):
                    return ((W - Wp) / delta_t + W @ Ai + Ai.T @ W
                            - 2.0 * nu * Qi + 2.0 * alpha * W)
                blocks.append(Block(f"observe[{i}]", n, NSD, (("W", i), ("W", i - 1), "nu"), fn))
        b = sys.bounds
        scalars = ["chi", "nu"]
        objective = {"chi": b.d1_max * b.b_max / gamma,
                     "nu": b.d2_max * b.c_max * b.g_max / gamma}

    else:  # controller
        if sys.sdc_A is None or sys.B1 is None:
            raise CvstemError(
                "controller synthesis needs sdc_A with sdc_A(x,t) @ x = f(x,t) and B1")
        if lam is None or lam < 0:
            raise CvstemError("lam must be nonnegative")
        A = [np.asarray(sys.sdc_A(states[i], times[i]), dtype=float) for i in range(npts)]
        BBt = [np.asarray(sys.B1(states[i], times[i]), dtype=float) for i in range(npts)]
        BBt = [bb @ bb.T for bb in BBt]
        for i in range(npts):
            Ai, Ri = A[i], BBt[i]
            if i == 0:
                def fn(W, nu, Ai=Ai, Ri=Ri):
                    return Ai @ W + W @ Ai.T - 2.0 * nu * Ri + 2.0 * alpha * W
                blocks.append(Block(f"track[{i}]", n, NSD, (("W", i), "nu"), fn))
            else:
                def fn(W, Wp, nu, Ai=Ai, Ri=Ri):
                    return (-(W - Wp) / delta_t + Ai @ W + W @ Ai.T
                            - 2.0 * nu * Ri + 2.0 * alpha * W)
                blocks.append(Block(f"track[{i}]", n, NSD, (("W", i), ("W", i - 1), "nu"), fn))
        b = sys.bounds
        scalars = ["chi", "nu"]
        objective = {"chi": b.b2_max * b.d_max / alpha, "nu": lam}

    eye = np.eye(n)
    for i in range(npts):
        blocks.append(Block(f"lower[{i}]", n, PSD, (("W", i),),
                            lambda W: W - eye))
        blocks.append(Block(f"upper[{i}]", n, PSD, (("W", i), "chi"),
                            lambda W, chi: chi * eye - W))
    if "nu" in scalars:
        blocks.append(Block("nu_floor", 1, PSD, ("nu",),
                            lambda nu: np.array([[nu - nu_min]])))

    return SdpProblem(scalars, [MatrixVarFamily("W", n, npts)], blocks, objective)


def assemble_contraction(traj: Trajectory, sys: DynamicalSystem, alpha, delta_t,
                         ) -> SdpProblem:
    _check_dt(traj, delta_t)
    return _assemble_points(traj.states, traj.times, sys, "contraction",
                            alpha, None, None, delta_t, 1e-6)


def assemble_estimator(traj: Trajectory, sys: DynamicalSystem, alpha, gamma,
                       delta_t, nu_min=1e-6) -> SdpProblem:
    _check_dt(traj, delta_t)
    return _assemble_points(traj.states, traj.times, sys, "estimator",
                            alpha, gamma, None, delta_t, nu_min)


def assemble_controller(traj: Trajectory, sys: DynamicalSystem, alpha, lam,
                        delta_t, nu_min=1e-6) -> SdpProblem:
    _check_dt(traj, delta_t)
    return _assemble_points(traj.states, traj.times, sys, "controller",
                            alpha, None, lam, delta_t, nu_min)


def objective_value(variant, sys, alpha, gamma, lam, chi, nu):
    """The variant objective recomputed from (chi, nu)."""
    b = sys.bounds
    if variant == "contraction":
        return b.d_max * chi / alpha
    if variant == "estimator":
        return (b.d1_max * b.b_max * chi + b.d2_max * b.c_max * b.g_max * nu) / gamma
    return b.b2_max * b.d_max * chi / alpha + lam * nu


def _chunk_ranges(n_steps, chunk):
    if chunk <= 0 or n_steps <= chunk:
        return [(0, n_steps)]
    out = []
    start = 0
    while start < n_steps:
        out.append((start, min(start + chunk, n_steps)))
        start += chunk
    return out


def _solve_trajectory(traj, sys, cfg, alpha):
    """Solve one variant at one alpha, chunking long horizons.

    Returns (J, chunk_solutions, status).  chunk_solutions is a list of
    (lo, hi, solution); status is "optimal" or the first failing status.
    """
    gamma = cfg.gamma_ratio * alpha
    sols = []
    chi_all, nu_all = 0.0, 0.0
    for lo, hi in _chunk_ranges(traj.n_steps, cfg.chunk):
        prob = _assemble_points(traj.states[lo:hi + 1], traj.times[lo:hi + 1],
                                sys, cfg.variant, alpha, gamma, cfg.lam,
                                traj.dt, cfg.nu_min)
        sol = solve(prob, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
        if sol.status != "optimal":
            return np.inf, [], sol.status
        sols.append((lo, hi, sol))
        chi_all = max(chi_all, sol.scalar_values["chi"])
        nu_all = max(nu_all, sol.scalar_values.get("nu", 1.0))
    J = objective_value(cfg.variant, sys, alpha, gamma, cfg.lam, chi_all, nu_all)
    return J, sols, "optimal"


def _samples_from_chunks(traj, chunk_sols, cfg, s_index):
    samples = []
    for ci, (lo, hi, sol) in enumerate(chunk_sols):
        nu = sol.scalar_values.get("nu", 1.0)
        W = sol.matrix_values["W"]
        first = 0 if ci == 0 else 1  # boundary index already emitted by the previous chunk
        for j in range(first, hi - lo + 1):
            i = lo + j
            try:
                M = metric_from_sample(W[j], nu)
            except Exception as exc:
                raise CvstemError(
                    f"metric recovery failed at trajectory {s_index}, step {i}: {exc}"
                ) from exc
            samples.append(MetricSample(s_index, i, float(traj.times[i]),
                                        traj.states[i].copy(), M))
    return samples


def line_search(traj: Trajectory, sys: DynamicalSystem, cfg: CvstemConfig,
                s_index=0, curve_out: Optional[list] = None,
                detail_out: Optional[dict] = None):
    """Scan cfg.alpha_grid, solving the variant at each alpha.

    Returns (alpha_star, samples, J_star) where alpha_star minimizes the
    objective (ties broken toward larger alpha) and samples holds the
    recovered per-step metrics at alpha_star.  Infeasible or unconverged
    alphas are skipped; if all fail, NoFeasibleAlphaError lists their
    statuses.  When curve_out is a list, (alpha, J, status) triples are
    appended for every grid point; when detail_out is a dict it receives
    the winning chi, nu, alpha, gamma, J.
    """
    _check_dt(traj, cfg.delta_t)
    best = None  # (J, alpha, chunk_sols)
    statuses = {}
    for alpha in cfg.alpha_grid:
        J, sols, status = _solve_trajectory(traj, sys, cfg, float(alpha))
        statuses[float(alpha)] = status
        if curve_out is not None:
            curve_out.append((float(alpha), J, status))
        if status != "optimal":
            continue
        if best is None or J <= best[0] + 1e-9 * max(1.0, abs(best[0])):
            best = (J, float(alpha), sols)
    if best is None:
        raise NoFeasibleAlphaError(statuses)
    J_star, alpha_star, sols = best
    if detail_out is not None:
        detail_out.update(
            chi=max(s.scalar_values["chi"] for _, _, s in sols),
            nu=max(s.scalar_values.get("nu", 1.0) for _, _, s in sols),
            alpha=alpha_star, gamma=cfg.gamma_ratio * alpha_star, J=J_star)
    samples = _samples_from_chunks(traj, sols, cfg, s_index)
    return alpha_star, samples, J_star


def build_dataset(trajs: Sequence[Trajectory], sys: DynamicalSystem,
                  cfg: CvstemConfig, out_path=None, curves_out=None,
                  detail_out=None):
    """Line-search every trajectory and pool the winning samples.

    Each trajectory gets its own alpha* from line_search and contributes
    its recovered per-step metrics at that alpha*.  Returns
    (samples, J_cv) with J_cv the max of the per-trajectory optima.

    curves_out, when a list, receives one [(alpha, J, status), ...]
    curve per trajectory.  detail_out, when a dict, is filled with
    per-trajectory arrays (alpha_star, J_star, chi, nu) plus
    pooled_alpha (the argmin of the mean objective over grid points
    feasible for every trajectory, ties toward larger alpha) and a
    "worst" sub-dict carrying what the runtime error bounds need: max
    chi, max nu, and the weakest certified rate gamma = ratio * min
    alpha*.  Writes the dataset CSV when out_path is given.
    """
    if len(trajs) < 1:
        raise CvstemError("need at least one trajectory")
    for traj in trajs:
        _check_dt(traj, cfg.delta_t)
    grid = [float(a) for a in cfg.alpha_grid]
    samples = []
    alpha_stars, J_stars, chis, nus = [], [], [], []
    J_table = np.full((len(trajs), len(grid)), np.inf)
    for s, traj in enumerate(trajs):
        if cfg.alpha_fixed is not None:
            alpha_s = float(cfg.alpha_fixed)
            if cfg.pointwise:
                smp = []
                chi_s, nu_s = 0.0, 0.0
                for i in range(traj.n_steps + 1):
                    try:
                        M, chi_i, nu_i = solve_pointwise(
                            sys, traj.states[i], traj.times[i], cfg, alpha_s)
                    except CvstemError as exc:
                        raise CvstemError(
                            f"trajectory {s}, step {i}: {exc}") from exc
                    smp.append(MetricSample(s, i, float(traj.times[i]),
                                            traj.states[i].copy(), M))
                    chi_s, nu_s = max(chi_s, chi_i), max(nu_s, nu_i)
                gamma = cfg.gamma_ratio * alpha_s
                J_s = objective_value(cfg.variant, sys, alpha_s, gamma,
                                      cfg.lam, chi_s, nu_s)
                curve = [(alpha_s, J_s, "optimal")]
                detail = {"chi": chi_s, "nu": nu_s}
            else:
                J_s, sols, status = _solve_trajectory(traj, sys, cfg, alpha_s)
                if status != "optimal":
                    raise CvstemError(
                        f"trajectory {s}: solve at alpha={alpha_s:g} ended {status}")
                smp = _samples_from_chunks(traj, sols, cfg, s)
                curve = [(alpha_s, J_s, status)]
                detail = {
                    "chi": max(sol.scalar_values["chi"] for _, _, sol in sols),
                    "nu": max(sol.scalar_values.get("nu", 1.0) for _, _, sol in sols),
                }
        else:
            curve = []
            detail = {}
            try:
                alpha_s, smp, J_s = line_search(traj, sys, cfg, s_index=s,
                                                curve_out=curve, detail_out=detail)
            except NoFeasibleAlphaError as exc:
                raise CvstemError(f"trajectory {s}: no feasible alpha "
                                  f"({exc})") from exc
        if curves_out is not None:
            curves_out.append(curve)
        for gi, (_, J, status) in enumerate(curve):
            if status == "optimal" and gi < J_table.shape[1]:
                J_table[s, gi] = J
        samples.extend(smp)
        alpha_stars.append(alpha_s)
        J_stars.append(J_s)
        chis.append(detail["chi"])
        nus.append(detail["nu"])
    J_cv = float(max(J_stars))
    if detail_out is not None:
        feasible = np.isfinite(J_table).all(axis=0)
        pooled_alpha = None
        if cfg.alpha_fixed is not None:
            pooled_alpha = float(cfg.alpha_fixed)
        elif feasible.any():
            mean_J = np.where(feasible, J_table.mean(axis=0), np.inf)
            gi_star = 0
            for gi in range(len(grid)):
                if mean_J[gi] <= mean_J[gi_star] + 1e-9 * max(1.0, abs(mean_J[gi_star])):
                    gi_star = gi
            pooled_alpha = grid[gi_star]
        detail_out.update(
            alpha_star=np.asarray(alpha_stars), J_star=np.asarray(J_stars),
            chi=np.asarray(chis), nu=np.asarray(nus),
            pooled_alpha=pooled_alpha,
            worst={"chi": float(max(chis)), "nu": float(max(nus)),
                   "alpha": float(min(alpha_stars)),
                   "gamma": cfg.gamma_ratio * float(min(alpha_stars)),
                   "J": J_cv})
    if out_path is not None:
        save_dataset(out_path, samples, sys.n)
    return samples, J_cv


def solve_pointwise(sys: DynamicalSystem, x, t, cfg: CvstemConfig, alpha):
    """Static single-point synthesis (time derivative treated as zero).

    Returns (M, chi, nu).  This is what the online sampling-based metric
    source solves at every measurement instant.
    """
    gamma = cfg.gamma_ratio * alpha
    prob = _assemble_points([np.asarray(x, dtype=float)], [float(t)], sys,
                            cfg.variant, alpha, gamma, cfg.lam, cfg.delta_t,
                            cfg.nu_min)
    sol = solve(prob, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    if sol.status != "optimal":
        raise CvstemError(f"pointwise synthesis at t={t:g} returned {sol.status}")
    nu = sol.scalar_values.get("nu", 1.0)
    M = metric_from_sample(sol.matrix_values["W"][0], nu)
    return M, sol.scalar_values["chi"], nu
