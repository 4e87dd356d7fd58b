"""Block-LMI semidefinite programs and a dense log-det barrier solver.

Problems are posed as named scalar variables plus families of symmetric
matrix variables, with constraints given as callables that map variable
values to symmetric blocks required to be positive (or negative)
semidefinite.  The callables must be affine; the solver probes them at
unit coordinates to extract an explicit standard form and verifies
affinity numerically before trusting it.

The solver is a textbook primal barrier method: a feasibility phase that
minimizes a uniform slack, then path following on t*objective + phi where
phi is the log-det barrier, with damped Newton steps and a geometric
barrier-parameter reduction of 0.2 per stage.  It is dense and meant for
blocks up to roughly a dozen rows and a few hundred variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import scipy.linalg

_SQRT2 = np.sqrt(2.0)

PSD = "psd"  # block required >= 0
NSD = "nsd"  # block required <= 0


class SdpError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixVarFamily:
    """A family of `count` symmetric dim x dim decision matrices."""

    name: str
    dim: int
    count: int


@dataclass(frozen=True)
class Block:
    """One LMI block: fn(*values) must be affine and return a symmetric
    size x size matrix; refs are scalar names or (family, index) pairs."""

    name: str
    size: int
    sign: str
    refs: Tuple
    fn: Callable


@dataclass
class SdpProblem:
    scalar_vars: List[str]
    matrix_vars: List[MatrixVarFamily]
    blocks: List[Block]
    objective: Dict[str, float]
    objective_const: float = 0.0

    def __post_init__(self):
        names = set(self.scalar_vars)
        fams = {f.name: f for f in self.matrix_vars}
        if len(names) != len(self.scalar_vars) or names & set(fams):
            raise SdpError("variable names must be unique")
        for key in self.objective:
            if key not in names:
                raise SdpError(f"objective references unknown scalar {key!r}")
        for b in self.blocks:
            if b.sign not in (PSD, NSD):
                raise SdpError(f"block {b.name!r} has bad sign {b.sign!r}")
            for ref in b.refs:
                if isinstance(ref, str):
                    if ref not in names:
                        raise SdpError(f"block {b.name!r} references unknown scalar {ref!r}")
                else:
                    fam, i = ref
                    if fam not in fams or not (0 <= i < fams[fam].count):
                        raise SdpError(f"block {b.name!r} references unknown matrix {ref!r}")


@dataclass
class SdpSolution:
    scalar_values: Dict[str, float]
    matrix_values: Dict[str, np.ndarray]
    objective_value: float
    status: str
    residual: float
    gap: float
    stages: int = 0
    newton_steps: int = 0

    def value(self, ref):
        if isinstance(ref, str):
            return self.scalar_values[ref]
        fam, i = ref
        return self.matrix_values[fam][i]


# ---------------------------------------------------------------------------
# symmetric vectorization (isometric: off-diagonals scaled by sqrt 2)


def svec_len(d):
    return d * (d + 1) // 2


def svec(S):
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    r, c = np.triu_indices(d)
    out = S[r, c].copy()
    out[r != c] *= _SQRT2
    return out


def smat(v, d):
    v = np.asarray(v, dtype=float)
    r, c = np.triu_indices(d)
    S = np.zeros((d, d))
    vals = v.copy()
    vals[r != c] /= _SQRT2
    S[r, c] = vals
    S[c, r] = vals
    return S


# ---------------------------------------------------------------------------
# standard form extraction


class _Group:
    """Blocks sharing (size, n_active), stacked for batched linear algebra."""

    def __init__(self, size, n_active):
        self.size = size
        self.n_active = n_active
        self.F0 = []
        self.F = []
        self.idx = []
        self.names = []
        self.internal = []

    def freeze(self):
        self.F0 = np.array(self.F0)
        self.F = np.array(self.F)
        self.idx = np.array(self.idx, dtype=int)
        self.internal = np.array(self.internal, dtype=bool)
        return self


class _StdForm:
    def __init__(self):
        self.offsets = {}
        self.kinds = {}
        self.n_z = 0
        self.groups = []
        self.c = None
        self.c_const = 0.0
        self.m_rows = 0
        self.ref_order = []


def _ref_label(ref):
    return ref if isinstance(ref, str) else f"{ref[0]}[{ref[1]}]"


def _check_symmetric(F, where):
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise SdpError(f"{where}: block callable did not return a square matrix")
    scale = max(1.0, np.abs(F).max())
    if np.abs(F - F.T).max() > 1e-8 * scale:
        raise SdpError(f"{where}: block callable returned a non-symmetric matrix")


def _standard_form(problem: SdpProblem, scalar_cap: float) -> _StdForm:
    std = _StdForm()
    for name in problem.scalar_vars:
        std.offsets[name] = (std.n_z, 1)
        std.kinds[name] = 0
        std.ref_order.append(name)
        std.n_z += 1
    for fam in problem.matrix_vars:
        for i in range(fam.count):
            ref = (fam.name, i)
            std.offsets[ref] = (std.n_z, svec_len(fam.dim))
            std.kinds[ref] = fam.dim
            std.ref_order.append(ref)
            std.n_z += svec_len(fam.dim)

    std.c = np.zeros(std.n_z)
    for name, coeff in problem.objective.items():
        std.c[std.offsets[name][0]] = coeff
    std.c_const = problem.objective_const

    def ref_value(ref, zloc):
        d = std.kinds[ref]
        return float(zloc[0]) if d == 0 else smat(zloc, d)

    rng = np.random.default_rng(0)
    groups = {}
    probes = 0
    for b in problem.blocks:
        zeros = [np.zeros(std.offsets[r][1]) for r in b.refs]
        vals = [ref_value(r, z) for r, z in zip(b.refs, zeros)]
        F0 = np.atleast_2d(np.asarray(b.fn(*vals), dtype=float))
        _check_symmetric(F0, b.name)
        if F0.shape[0] != b.size:
            raise SdpError(f"{b.name}: declared size {b.size}, callable returned {F0.shape[0]}")
        coeffs = []
        gidx = []
        for k, ref in enumerate(b.refs):
            off, length = std.offsets[ref]
            for j in range(length):
                zloc = [np.zeros(std.offsets[r][1]) for r in b.refs]
                zloc[k][j] = 1.0
                vals = [ref_value(r, z) for r, z in zip(b.refs, zloc)]
                Fj = np.atleast_2d(np.asarray(b.fn(*vals), dtype=float)) - F0
                _check_symmetric(Fj, b.name)
                coeffs.append(Fj)
                gidx.append(off + j)
                probes += 1
        coeffs = np.array(coeffs) if coeffs else np.zeros((0, b.size, b.size))

        # affinity check at a random assignment
        ztest = [rng.standard_normal(std.offsets[r][1]) for r in b.refs]
        vals = [ref_value(r, z) for r, z in zip(b.refs, ztest)]
        direct = np.atleast_2d(np.asarray(b.fn(*vals), dtype=float))
        flat = np.concatenate(ztest) if ztest else np.zeros(0)
        recon = F0 + np.tensordot(flat, coeffs, axes=(0, 0)) if coeffs.size else F0
        scale = max(1.0, np.abs(direct).max())
        if np.abs(direct - recon).max() > 1e-9 * scale:
            raise SdpError(f"{b.name}: block callable is not affine in its variables")

        if b.sign == NSD:
            F0 = -F0
            coeffs = -coeffs
        key = (b.size, len(gidx))
        grp = groups.setdefault(key, _Group(*key))
        grp.F0.append(F0)
        grp.F.append(coeffs)
        grp.idx.append(gidx)
        grp.names.append(b.name)
        grp.internal.append(False)
        std.m_rows += b.size

    # internal box blocks keep every scalar coordinate inside +-scalar_cap so
    # the barrier always has a bounded analytic center, even when a scalar
    # does not appear in the objective
    for name in problem.scalar_vars:
        off = std.offsets[name][0]
        for sgn in (+1.0, -1.0):
            grp = groups.setdefault((1, 1), _Group(1, 1))
            grp.F0.append(np.array([[scalar_cap]]))
            grp.F.append(np.array([[[sgn]]]))
            grp.idx.append([off])
            grp.names.append(f"_cap:{name}")
            grp.internal.append(True)
            std.m_rows += 1

    std.groups = [g.freeze() for g in sorted(groups.values(), key=lambda g: (g.size, g.n_active))]
    return std


# ---------------------------------------------------------------------------
# barrier machinery


def _eval_blocks(std, z):
    """Barrier value -sum log det, or +inf when any block leaves the cone."""
    phi = 0.0
    for g in std.groups:
        S = g.F0 + np.einsum("bjrc,bj->brc", g.F, z[g.idx], optimize=True)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return np.inf
        diag = np.diagonal(L, axis1=1, axis2=2)
        if np.any(diag <= 0.0):
            return np.inf
        phi -= 2.0 * np.sum(np.log(diag))
    return phi


def _grad_hess(std, z):
    """(phi, grad, hess) of the log-det barrier at a strictly feasible z."""
    n = std.n_z
    g_out = np.zeros(n)
    H = np.zeros((n, n))
    phi = 0.0
    for g in std.groups:
        S = g.F0 + np.einsum("bjrc,bj->brc", g.F, z[g.idx], optimize=True)
        L = np.linalg.cholesky(S)
        diag = np.diagonal(L, axis1=1, axis2=2)
        phi -= 2.0 * np.sum(np.log(diag))
        G = np.linalg.solve(S[:, None, :, :], g.F)
        trG = np.einsum("bjii->bj", G)
        np.add.at(g_out, g.idx, -trG)
        Hloc = np.einsum("bjrc,blcr->bjl", G, G, optimize=True)
        np.add.at(H, (g.idx[:, :, None], g.idx[:, None, :]), Hloc)
    return phi, g_out, H


def _newton_solve(H, rhs):
    scale = max(np.abs(np.diagonal(H)).max(), 1.0)
    ridge = 0.0
    for _ in range(8):
        try:
            cf = scipy.linalg.cho_factor(H + ridge * scale * np.eye(H.shape[0]), lower=True)
            return scipy.linalg.cho_solve(cf, rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            ridge = 1e-14 if ridge == 0.0 else ridge * 100.0
    return None


class _Stats:
    def __init__(self):
        self.stages = 0
        self.newton = 0


def _center(std, z, t, c, max_iter, stats, stop_early=None):
    """Minimize t*c.z + phi(z) from strictly feasible z.  Returns (z, ok)."""
    c_shift = float(c @ z)
    psi = t * (c @ z - c_shift) + _eval_blocks(std, z)
    stall = 0
    for _ in range(max_iter):
        if stop_early is not None and stop_early(z):
            return z, True
        stats.newton += 1
        phi, gphi, H = _grad_hess(std, z)
        grad = t * c + gphi
        dz = _newton_solve(H, -grad)
        if dz is None:
            return z, False
        lam2 = float(-grad @ dz)
        scale_psi = abs(t * (c @ z)) + abs(phi) + 1.0
        if lam2 <= max(2e-10, 1e-14 * scale_psi):
            return z, True
        gdot = float(grad @ dz)
        step = 1.0
        while step >= 1e-16:
            znew = z + step * dz
            psinew = t * (c @ znew - c_shift) + _eval_blocks(std, znew)
            if psinew <= psi + 0.25 * step * gdot:
                break
            step *= 0.5
        else:
            return z, lam2 <= 1e-6
        if psi - psinew <= 1e-13 * (1.0 + abs(psi)):
            stall += 1
            if stall >= 3:
                return znew, True
        else:
            stall = 0
        z, psi = znew, psinew
    return z, False


def _path_follow(std, z, c, c_const, tol, max_iter, max_stages, stats, stop_early=None):
    """Barrier path following; returns (z, converged, gap)."""
    t = 1.0
    for _ in range(max_stages):
        stats.stages += 1
        z, ok = _center(std, z, t, c, max_iter, stats, stop_early)
        if not ok:
            return z, False, std.m_rows / t
        if stop_early is not None and stop_early(z):
            return z, True, std.m_rows / t
        gap = std.m_rows / t
        obj = float(c @ z) + c_const
        if gap <= tol * max(1.0, abs(obj)):
            return z, True, gap
        t *= 5.0
    return z, False, std.m_rows / t


def _phase_one(std, tol, max_iter, max_stages, stats):
    """Uniform-slack feasibility phase.  Returns (z or None, certified)."""
    aug = _StdForm()
    aug.n_z = std.n_z + 1
    s_idx = std.n_z
    aug.m_rows = std.m_rows + 1
    groups = []
    for g in std.groups:
        ng = _Group(g.size, g.n_active + 1)
        B = g.F0.shape[0]
        eye = np.broadcast_to(np.eye(g.size), (B, 1, g.size, g.size))
        ng.F0 = g.F0
        ng.F = np.concatenate([g.F, eye], axis=1)
        ng.idx = np.concatenate([g.idx, np.full((B, 1), s_idx)], axis=1)
        groups.append(ng)
    floor = _Group(1, 1)
    floor.F0 = np.array([[[1.0]]])
    floor.F = np.array([[[[1.0]]]])
    floor.idx = np.array([[s_idx]])
    groups.append(floor)
    aug.groups = groups

    z0 = np.zeros(aug.n_z)
    worst = 0.0
    for g in std.groups:
        w = np.linalg.eigvalsh(g.F0).min(axis=1).min()
        worst = min(worst, float(w))
    z0[s_idx] = 1.0 - worst

    c = np.zeros(aug.n_z)
    c[s_idx] = 1.0
    zout, converged, _ = _path_follow(
        aug, z0, c, 0.0, tol, max_iter, max_stages, stats,
        stop_early=lambda zz: zz[s_idx] <= -1e-4)
    s_final = float(zout[s_idx])
    if s_final <= -tol:
        return zout[:s_idx], True
    return None, converged


def _extract(problem, std, z):
    scalar_values = {}
    for name in problem.scalar_vars:
        scalar_values[name] = float(z[std.offsets[name][0]])
    matrix_values = {}
    for fam in problem.matrix_vars:
        stack = np.zeros((fam.count, fam.dim, fam.dim))
        for i in range(fam.count):
            off, length = std.offsets[(fam.name, i)]
            stack[i] = smat(z[off:off + length], fam.dim)
        matrix_values[fam.name] = stack
    return scalar_values, matrix_values


def _worst_residual(std, z):
    worst = np.inf
    for g in std.groups:
        ext = np.asarray(g.internal, dtype=bool)
        if ext.all():
            continue
        S = g.F0 + np.einsum("bjrc,bj->brc", g.F, z[g.idx], optimize=True)
        eigs = np.linalg.eigvalsh(S).min(axis=1)
        eigs = eigs[~ext] if ext.any() else eigs
        if eigs.size:
            worst = min(worst, float(eigs.min()))
    return worst


def solve(problem: SdpProblem, tol: float = 1e-8, max_iter: int = 200,
          max_stages: int = 60, scalar_cap: float = 1e9) -> SdpSolution:
    """Minimize the linear objective subject to the problem's LMI blocks.

    status is "optimal" when the barrier path reached the requested relative
    gap, "infeasible" when the feasibility phase converged with slack above
    -tol, and "max_iter" when an iteration cap was hit first (the best
    iterate found is still returned).
    """
    if tol <= 0:
        raise SdpError("tol must be positive")
    std = _standard_form(problem, scalar_cap)
    stats = _Stats()

    z_feas, certified = _phase_one(std, tol, max_iter, max_stages, stats)
    if z_feas is None:
        status = "infeasible" if certified else "max_iter"
        scalars = {name: 0.0 for name in problem.scalar_vars}
        mats = {f.name: np.zeros((f.count, f.dim, f.dim)) for f in problem.matrix_vars}
        return SdpSolution(scalars, mats, np.nan, status, -np.inf, np.inf,
                           stats.stages, stats.newton)

    z, converged, gap = _path_follow(std, z_feas, std.c, std.c_const, tol,
                                     max_iter, max_stages, stats)
    scalar_values, matrix_values = _extract(problem, std, z)
    obj = float(std.c @ z) + std.c_const
    status = "optimal" if converged else "max_iter"
    return SdpSolution(scalar_values, matrix_values, obj, status,
                       _worst_residual(std, z), gap, stats.stages, stats.newton)


# ---------------------------------------------------------------------------
# verification


@dataclass
class ResidualReport:
    block_names: List[str]
    min_eigs: List[float]
    objective: float
    worst: float

    def ok(self, tol):
        return self.worst >= -tol


def _solution_value(problem, solution, ref):
    if isinstance(ref, str):
        return solution.scalar_values[ref]
    fam, i = ref
    stack = solution.matrix_values[fam]
    spec = next(f for f in problem.matrix_vars if f.name == fam)
    if stack.shape != (spec.count, spec.dim, spec.dim):
        raise SdpError(f"matrix values for {fam!r} have shape {stack.shape}, "
                       f"expected {(spec.count, spec.dim, spec.dim)}")
    return stack[i]


def check_solution(problem: SdpProblem, solution: SdpSolution) -> ResidualReport:
    """Re-evaluate every block at the solution, independent of the solver.

    Reports each block's smallest eigenvalue in the >=0 sense (<=0 blocks
    are negated first) and recomputes the objective from the stored values.
    """
    names, eigs = [], []
    for b in problem.blocks:
        vals = [_solution_value(problem, solution, r) for r in b.refs]
        F = np.atleast_2d(np.asarray(b.fn(*vals), dtype=float))
        if F.shape != (b.size, b.size):
            raise SdpError(f"{b.name}: evaluated shape {F.shape} does not match size {b.size}")
        if b.sign == NSD:
            F = -F
        names.append(b.name)
        eigs.append(float(np.linalg.eigvalsh(0.5 * (F + F.T)).min()))
    obj = problem.objective_const + sum(
        coeff * solution.scalar_values[name] for name, coeff in problem.objective.items())
    worst = min(eigs) if eigs else 0.0
    return ResidualReport(names, eigs, obj, worst)


def dump_problem(problem: SdpProblem, path, scalar_cap: float = 1e9):
    """Write the probed standard form as text: variables, then per block the
    nonzero constant entries and per-variable coefficients, all in the >=0
    orientation.  Matrix-variable coefficients are per matrix entry."""
    std = _standard_form(problem, scalar_cap)
    entry_label = {}
    for ref in std.ref_order:
        off, length = std.offsets[ref]
        d = std.kinds[ref]
        if d == 0:
            entry_label[off] = (ref, 1.0)
        else:
            r, c = np.triu_indices(d)
            for j in range(length):
                lab = f"{ref[0]}[{ref[1]}]({r[j]},{c[j]})"
                entry_label[off + j] = (lab, _SQRT2 if r[j] != c[j] else 1.0)

    with open(path, "w") as fh:
        fh.write("sdp-problem\n")
        fh.write("scalars: " + " ".join(problem.scalar_vars) + "\n")
        for fam in problem.matrix_vars:
            fh.write(f"matrix-family: {fam.name} dim={fam.dim} count={fam.count}\n")
        obj_terms = " + ".join(f"{v:.17g}*{k}" for k, v in problem.objective.items())
        fh.write(f"objective: {obj_terms or '0'} + {problem.objective_const:.17g}\n")
        for g in std.groups:
            for bi in range(g.F0.shape[0]):
                if g.internal[bi]:
                    continue
                fh.write(f"block {g.names[bi]} size={g.size}\n")
                F0 = g.F0[bi]
                for r in range(g.size):
                    for c in range(r, g.size):
                        if F0[r, c] != 0.0:
                            fh.write(f"  const {r} {c} {F0[r, c]:.17g}\n")
                for j in range(g.n_active):
                    lab, scale = entry_label[g.idx[bi, j]]
                    Fj = g.F[bi, j]
                    for r in range(g.size):
                        for c in range(r, g.size):
                            if Fj[r, c] != 0.0:
                                fh.write(f"  coef {r} {c} {lab} {Fj[r, c] / scale:.17g}\n")
