"""Nominal trajectory planning by direct transcription.

Decision variables are the grid inputs held zero-order over each step.
The objective is input energy plus a quadratic terminal penalty plus a
smooth (squared-hinge) obstacle-clearance penalty whose keep-out radius
is inflated by the tube radius.  A projected-gradient method with Armijo
backtracking solves the problem; when the solution still violates the
inflated obstacles the penalty weight is escalated and the solve
continues from the current iterate.

Gradients come from the adjoint recursion with the per-step sensitivity
of an RK4 step computed from its degree-4 polynomial form

    Phi = I + hJ + (hJ)^2/2 + (hJ)^3/6 + (hJ)^4/24
    Psi = h (I + hJ/2 + (hJ)^2/6 + (hJ)^3/24) B1

with J the state Jacobian of f + B1 u frozen at the step start.  For
linear dynamics this is the exact derivative of the RK4 map.
"""

from __future__ import annotations

import heapq

import numpy as np

from .control import obstacle_clearances
from .dynamics import Trajectory, rk4_step


class PlanningFailedError(RuntimeError):
    """Raised when the budgeted solve misses the terminal tolerance or
    the inflated obstacles; carries the best iterate for inspection."""

    def __init__(self, message, plan, diagnostics):
        super().__init__(message)
        self.plan = plan
        self.diagnostics = diagnostics


def _rollout(sys, x0, U, dt, times):
    X = np.empty((U.shape[0] + 1, x0.size))
    X[0] = x0
    x = x0
    for i, u in enumerate(U):
        def rhs(xc, tc, u=u):
            return sys.f(xc, tc) + sys.B1(xc, tc) @ u
        x = rk4_step(rhs, x, times[i], dt)
        X[i + 1] = x
    return X


def _input_jacobian_state_part(sys, x, u, t, step=1e-6):
    """Finite-difference d(B1(x) u)/dx; exactly zero for constant B1."""
    n = x.size
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        out[:, j] = (sys.B1(x + e, t) @ u - sys.B1(x - e, t) @ u) / (2 * step)
    return out


def _step_sensitivities(sys, x, u, t, dt):
    J = sys.A(x, t) + _input_jacobian_state_part(sys, x, u, t)
    hJ = dt * J
    hJ2 = hJ @ hJ
    hJ3 = hJ2 @ hJ
    Phi = np.eye(x.size) + hJ + hJ2 / 2.0 + hJ3 / 6.0 + hJ3 @ hJ / 24.0
    Psi = dt * (np.eye(x.size) + hJ / 2.0 + hJ2 / 6.0 + hJ3 / 24.0) @ sys.B1(x, t)
    return Phi, Psi


def _segment_clear(p, q, obstacles, inflate, spacing=0.25):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    length = float(np.hypot(*(q - p)))
    n_pts = max(2, int(np.ceil(length / spacing)) + 1)
    pts = p[None, :] + np.linspace(0.0, 1.0, n_pts)[:, None] * (q - p)[None, :]
    for cx, cy, r in obstacles:
        if np.any(np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= r + inflate):
            return False
    return True


def _route_waypoints(p0, p1, obstacles, inflate, res=0.25):
    """Collision-free polyline from p0 to p1 in the obstacle plane.

    Runs Dijkstra on an 8-connected occupancy grid (cells within inflate
    of an obstacle blocked), then drops waypoints that a straight
    segment can skip.  Returns an array of 2D waypoints including the
    endpoints, or None when the grid holds no route.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if obstacles is None or len(obstacles) == 0 or _segment_clear(p0, p1, obstacles, inflate):
        return np.vstack([p0, p1])
    obs = np.asarray(obstacles, dtype=float)
    pad = 2.0 + 2 * res
    lo = np.minimum(np.minimum(p0, p1), (obs[:, :2] - (obs[:, 2] + inflate)[:, None]).min(axis=0)) - pad
    hi = np.maximum(np.maximum(p0, p1), (obs[:, :2] + (obs[:, 2] + inflate)[:, None]).max(axis=0)) + pad
    nx = int(np.ceil((hi[0] - lo[0]) / res)) + 1
    ny = int(np.ceil((hi[1] - lo[1]) / res)) + 1
    gx = lo[0] + res * np.arange(nx)
    gy = lo[1] + res * np.arange(ny)
    blocked = np.zeros((nx, ny), dtype=bool)
    for cx, cy, r in obs:
        blocked |= ((gx[:, None] - cx) ** 2 + (gy[None, :] - cy) ** 2
                    <= (r + inflate) ** 2)

    def to_cell(p):
        return (int(round((p[0] - lo[0]) / res)), int(round((p[1] - lo[1]) / res)))

    def nearest_free(cell):
        if not blocked[cell]:
            return cell
        for radius in range(1, 8):
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    i, j = cell[0] + di, cell[1] + dj
                    if 0 <= i < nx and 0 <= j < ny and not blocked[i, j]:
                        return (i, j)
        return None

    start = nearest_free(to_cell(p0))
    goal = nearest_free(to_cell(p1))
    if start is None or goal is None:
        return None
    moves = [(di, dj, res * np.hypot(di, dj))
             for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    dist = np.full((nx, ny), np.inf)
    dist[start] = 0.0
    prev = {}
    heap = [(0.0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == goal:
            break
        if d > dist[cell]:
            continue
        for di, dj, w in moves:
            i, j = cell[0] + di, cell[1] + dj
            if 0 <= i < nx and 0 <= j < ny and not blocked[i, j] and d + w < dist[i, j]:
                dist[i, j] = d + w
                prev[(i, j)] = cell
                heapq.heappush(heap, (d + w, (i, j)))
    if not np.isfinite(dist[goal]):
        return None
    cells = [goal]
    while cells[-1] != start:
        cells.append(prev[cells[-1]])
    cells.reverse()
    pts = [p0] + [np.array([lo[0] + res * i, lo[1] + res * j]) for i, j in cells] + [p1]
    # line-of-sight simplification; slightly deflated so grid-resolution
    # grazing does not block the skip
    way = [pts[0]]
    k = 0
    while k < len(pts) - 1:
        nxt = k + 1
        for cand in range(len(pts) - 1, k, -1):
            if _segment_clear(pts[k], pts[cand], obstacles, inflate * 0.999):
                nxt = cand
                break
        way.append(pts[nxt])
        k = nxt
    return np.vstack(way)


def _seed_inputs(sys, x_start, x_goal, waypoints, times, dt, lo, hi):
    """Dynamically consistent warm start that tracks the waypoint line.

    A PD law on position (and on yaw toward the goal yaw) follows a
    cosine-profile progress along the polyline; the commanded wrench is
    mapped to thruster inputs by the minimum-norm inverse of the force
    rows of B1 and clipped to the input box.  Only the recorded inputs
    matter; the optimizer owns the trajectory afterwards.
    """
    way = np.asarray(waypoints, dtype=float)
    seg = np.diff(way, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = seg_len > 1e-9
    if not np.any(keep):
        return np.zeros((len(times) - 1, sys.m))
    seg, seg_len = seg[keep], seg_len[keep]
    way = np.vstack([way[:1], way[:1] + np.cumsum(seg, axis=0)])
    s_knots = np.concatenate([[0.0], np.cumsum(seg_len)])
    L = s_knots[-1]
    T_travel = max(0.8 * times[-1], dt)
    N = len(times) - 1
    U = np.zeros((N, sys.m))
    x = np.asarray(x_start, dtype=float).copy()
    kp, kd = 0.4, 1.25
    for i in range(N):
        t = times[i]
        tau = min(t / T_travel, 1.0)
        s = 0.5 * L * (1.0 - np.cos(np.pi * tau))
        sdot = 0.5 * L * np.pi / T_travel * np.sin(np.pi * tau)
        p_d = np.array([np.interp(s, s_knots, way[:, 0]),
                        np.interp(s, s_knots, way[:, 1])])
        k = min(int(np.searchsorted(s_knots, s, side="right")) - 1, len(seg) - 1)
        v_d = sdot * seg[k] / seg_len[k]
        a_cmd = kp * (p_d - x[:2]) + kd * (v_d - x[3:5])
        wrench = np.array([a_cmd[0], a_cmd[1],
                           kp * (x_goal[2] - x[2]) - kd * x[5]])
        Bv = sys.B1(x, t)[3:, :]
        u = Bv.T @ np.linalg.solve(Bv @ Bv.T, wrench)
        U[i] = np.clip(u, lo, hi)

        def rhs(xc, tc, u=U[i]):
            return sys.f(xc, tc) + sys.B1(xc, tc) @ u

        x = rk4_step(rhs, x, t, dt)
    return U


def _terminal_correction(sys, x0, U, dt, times, x_goal, lo, hi, passes=3):
    """Minimum-norm Newton correction of the terminal residual.

    Builds the sensitivity of the final state to every grid input from
    the per-step (Phi, Psi) pairs and applies the least-squares input
    update that cancels x_goal - X[-1], clipped to the box.  A few
    passes absorb the mild nonlinearity; the clip can leave residual
    when the box binds.
    """
    N, m = U.shape
    n = x0.size
    for _ in range(passes):
        X = _rollout(sys, x0, U, dt, times)
        r = x_goal - X[-1]
        if float(np.linalg.norm(r)) < 1e-10:
            break
        S = np.empty((n, N * m))
        P = np.eye(n)
        for i in range(N - 1, -1, -1):
            Phi, Psi = _step_sensitivities(sys, X[i], U[i], times[i], dt)
            S[:, i * m:(i + 1) * m] = P @ Psi
            P = P @ Phi
        gram = S @ S.T + 1e-9 * np.eye(n)
        dU = (S.T @ np.linalg.solve(gram, r)).reshape(N, m)
        U = np.clip(U + dU, lo, hi)
    return U


def _obstacle_terms(X, obstacles, keepout, weight, dt):
    """Penalty value and its state gradient rows for all grid points."""
    grad = np.zeros_like(X)
    if obstacles is None or len(obstacles) == 0 or weight == 0.0:
        return 0.0, grad
    obstacles = np.asarray(obstacles, dtype=float)
    pos = X[:, :2]
    diff = pos[:, None, :] - obstacles[None, :, :2]
    dist = np.linalg.norm(diff, axis=2)
    margin = obstacles[:, 2] + keepout
    hinge = np.maximum(0.0, margin[None, :] - dist)
    value = weight * dt * float(np.sum(hinge ** 2))
    active = hinge > 0
    if np.any(active):
        safe = np.where(dist > 1e-12, dist, 1.0)
        coeff = -2.0 * weight * dt * hinge / safe
        grad[:, :2] = np.sum(coeff[:, :, None] * diff, axis=1)
    return value, grad


def _objective_and_grad(sys, x0, U, dt, times, x_goal, obstacles, keepout,
                        w_terminal, w_obstacle, want_grad=True):
    X = _rollout(sys, x0, U, dt, times)
    term = X[-1] - x_goal
    obs_value, obs_grad = _obstacle_terms(X, obstacles, keepout, w_obstacle, dt)
    J = dt * float(np.sum(U ** 2)) + w_terminal * float(term @ term) + obs_value
    if not want_grad:
        return J, X, None
    lam = 2.0 * w_terminal * term + obs_grad[-1]
    G = np.empty_like(U)
    for i in range(U.shape[0] - 1, -1, -1):
        Phi, Psi = _step_sensitivities(sys, X[i], U[i], times[i], dt)
        G[i] = 2.0 * dt * U[i] + Psi.T @ lam
        lam = obs_grad[i] + Phi.T @ lam
    return J, X, G


def plan_nominal(sys, x_start, x_goal, obstacles, horizon, dt, input_box=(0.0, 1.0),
                 tube=0.0, w_terminal=100.0, w_obstacle=10.0, max_iters=300,
                 max_rounds=5, terminal_tol=1e-2, step0=1.0, clearance_pad=0.05):
    """Plan an input sequence from x_start toward x_goal.

    obstacles is an iterable of (cx, cy, r) circles in the first two
    state components, or None; their keep-out radius is inflated by
    tube + clearance_pad (the pad keeps penalty solutions strictly
    outside the required tube).  Returns a dynamically consistent
    Trajectory (states from re-integration of the returned inputs).
    Raises PlanningFailedError when the iteration budget leaves the
    terminal state outside terminal_tol or the plan inside an inflated
    obstacle.
    """
    if sys.B1 is None:
        raise ValueError(f"system {sys.name!r} has no control input channel")
    x_start = np.asarray(x_start, dtype=float)
    x_goal = np.asarray(x_goal, dtype=float)
    N = int(round(horizon / dt))
    if N < 1:
        raise ValueError("horizon must cover at least one step")
    times = dt * np.arange(N + 1)
    lo, hi = input_box
    keepout = tube + clearance_pad
    U = np.full((N, sys.m), np.clip(0.0, lo, hi))
    if x_start.size == 6 and sys.m >= 3:
        # planar-vehicle warm start: route the position components around
        # the inflated obstacles, then track that line to seed the inputs
        way = _route_waypoints(x_start[:2], x_goal[:2], obstacles,
                               keepout + 0.35)
        if way is not None:
            U = _seed_inputs(sys, x_start, x_goal, way, times, dt, lo, hi)
    w_obs = float(w_obstacle)
    w_term = float(w_terminal)
    stats = {"iterations": 0, "rounds": 0, "objective": np.inf}

    for round_idx in range(max_rounds):
        stats["rounds"] = round_idx + 1
        J, X, G = _objective_and_grad(sys, x_start, U, dt, times, x_goal,
                                      obstacles, keepout, w_term, w_obs)
        # spectral projected gradient: Barzilai-Borwein step lengths with a
        # nonmonotone (last-10) Armijo acceptance test
        step = step0
        recent = [J]
        for _ in range(max_iters):
            stats["iterations"] += 1
            J_ref = max(recent)
            accepted = False
            for _ in range(40):
                U_trial = np.clip(U - step * G, lo, hi)
                move_sq = float(np.sum((U_trial - U) ** 2))
                if move_sq == 0.0:
                    break
                J_trial, X_trial, _ = _objective_and_grad(
                    sys, x_start, U_trial, dt, times, x_goal, obstacles, keepout,
                    w_term, w_obs, want_grad=False)
                if J_trial <= J_ref - 1e-4 * move_sq / step:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            J_new, _, G_new = _objective_and_grad(
                sys, x_start, U_trial, dt, times, x_goal, obstacles, keepout,
                w_term, w_obs)
            dU = U_trial - U
            dG = G_new - G
            curv = float(np.sum(dU * dG))
            if curv > 1e-12:
                step = float(np.clip(np.sum(dU * dU) / curv, 1e-8, 1e4))
            else:
                step = min(step * 2.0, 1e4)
            U, X, J, G = U_trial, X_trial, J_new, G_new
            recent.append(J)
            if len(recent) > 10:
                recent.pop(0)
            if move_sq < 1e-16 * max(1.0, float(np.sum(U * U))):
                break
        # the descent phase owns effort and clearance; the remaining
        # 6-dimensional terminal residual is cheaper to close exactly
        U = _terminal_correction(sys, x_start, U, dt, times, x_goal, lo, hi)
        J, X, _ = _objective_and_grad(sys, x_start, U, dt, times, x_goal,
                                      obstacles, keepout, w_term, w_obs,
                                      want_grad=False)
        stats["objective"] = J

        term_err = float(np.linalg.norm(X[-1] - x_goal))
        if obstacles is not None and len(obstacles) > 0:
            min_clear = float(obstacle_clearances(X, obstacles).min())
        else:
            min_clear = np.inf
        stats["terminal_error"] = term_err
        stats["min_clearance"] = min_clear
        if min_clear >= tube and term_err <= terminal_tol:
            break
        if min_clear < tube:
            w_obs *= 10.0
        if term_err > terminal_tol:
            w_term *= 5.0

    inputs = np.vstack([U, U[-1:]])
    plan = Trajectory(times=times, states=X, inputs=inputs)
    if stats["terminal_error"] > terminal_tol or stats["min_clearance"] < tube:
        raise PlanningFailedError(
            f"planning failed: terminal error {stats['terminal_error']:.3g} "
            f"(tol {terminal_tol:.3g}), min obstacle clearance "
            f"{stats['min_clearance']:.3g} (required {tube:.3g})",
            plan, stats)
    return plan
