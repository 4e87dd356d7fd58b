import numpy as np
import pytest

from ncmkit.sdp import (
    NSD,
    PSD,
    Block,
    MatrixVarFamily,
    SdpError,
    SdpProblem,
    SdpSolution,
    check_solution,
    dump_problem,
    smat,
    solve,
    svec,
    svec_len,
)


def test_svec_smat_round_trip():
    rng = np.random.default_rng(0)
    for d in (1, 2, 3, 5, 8):
        S = rng.standard_normal((d, d))
        S = 0.5 * (S + S.T)
        v = svec(S)
        assert v.shape == (svec_len(d),)
        np.testing.assert_allclose(smat(v, d), S, rtol=1e-14, atol=1e-15)
        # the scaling is isometric: <S,S>_F = <v,v>
        assert np.sum(S * S) == pytest.approx(float(v @ v))


def scalar_lp(c_min, lo, hi):
    """minimize c_min * x subject to lo <= x <= hi, as 1x1 LMI blocks."""
    return SdpProblem(
        scalar_vars=["x"],
        matrix_vars=[],
        blocks=[
            Block("lower", 1, PSD, ("x",), lambda x: np.array([[x - lo]])),
            Block("upper", 1, PSD, ("x",), lambda x: np.array([[hi - x]])),
        ],
        objective={"x": c_min},
    )


def test_scalar_box_minimum():
    sol = solve(scalar_lp(1.0, -2.0, 5.0))
    assert sol.status == "optimal"
    assert sol.scalar_values["x"] == pytest.approx(-2.0, abs=1e-5)
    sol = solve(scalar_lp(-1.0, -2.0, 5.0))
    assert sol.scalar_values["x"] == pytest.approx(5.0, abs=1e-5)


def test_infeasible_box_certified():
    sol = solve(scalar_lp(1.0, 2.0, 1.0))  # empty interval
    assert sol.status == "infeasible"


def test_max_eigenvalue_sdp():
    # minimize t with t*I - A >= 0: optimum is lambda_max(A)
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    A = 0.5 * (A + A.T)
    prob = SdpProblem(
        scalar_vars=["t"],
        matrix_vars=[],
        blocks=[Block("cover", 4, PSD, ("t",), lambda t: t * np.eye(4) - A)],
        objective={"t": 1.0},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    lam_max = float(np.linalg.eigvalsh(A).max())
    assert sol.scalar_values["t"] == pytest.approx(lam_max, abs=1e-5)


def test_lyapunov_feasibility_with_matrix_var():
    # A Hurwitz: find P >= I with A'P + PA <= -I, then verify by eigenvalues
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    prob = SdpProblem(
        scalar_vars=[],
        matrix_vars=[MatrixVarFamily("P", 2, 1)],
        blocks=[
            Block("lyap", 2, NSD, (("P", 0),),
                  lambda P: A.T @ P + P @ A + np.eye(2)),
            Block("floor", 2, PSD, (("P", 0),), lambda P: P - np.eye(2)),
        ],
        objective={},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    P = sol.value(("P", 0))
    assert np.linalg.eigvalsh(P).min() >= 1.0 - 1e-6
    assert np.linalg.eigvalsh(A.T @ P + P @ A + np.eye(2)).max() <= 1e-6


def test_trace_objective_via_scalar_coupling():
    # minimize x with x - a >= 0 for several constants: optimum is max(a)
    consts = [0.3, 1.7, -0.5]
    blocks = [Block(f"ge{i}", 1, PSD, ("x",), lambda x, a=a: np.array([[x - a]]))
              for i, a in enumerate(consts)]
    prob = SdpProblem(["x"], [], blocks, {"x": 1.0})
    sol = solve(prob)
    assert sol.scalar_values["x"] == pytest.approx(max(consts), abs=1e-5)


def test_check_solution_reports_residuals():
    prob = scalar_lp(1.0, 0.0, 2.0)
    sol = solve(prob)
    report = check_solution(prob, sol)
    assert report.ok(1e-6)
    assert set(report.block_names) == {"lower", "upper"}
    # a hand-built feasible point has nonnegative residuals
    hand = SdpSolution({"x": 1.0}, {}, 1.0, "optimal", 0.0, 0.0)
    assert check_solution(prob, hand).worst >= 1.0 - 1e-12


def test_solution_residual_certificate():
    prob = scalar_lp(1.0, -1.0, 1.0)
    sol = solve(prob)
    assert sol.status == "optimal"
    assert sol.residual >= -1e-6
    assert sol.gap <= 1e-6 * max(1.0, abs(sol.objective_value))


def test_rejects_nonaffine_block():
    prob = SdpProblem(
        ["x"], [],
        [Block("sq", 1, PSD, ("x",), lambda x: np.array([[x * x + 1.0]]))],
        {"x": 1.0})
    with pytest.raises(SdpError):
        solve(prob)


def test_rejects_asymmetric_block():
    prob = SdpProblem(
        [], [MatrixVarFamily("P", 2, 1)],
        [Block("bad", 2, PSD, (("P", 0),),
               lambda P: P + np.array([[0.0, 1.0], [0.0, 0.0]]))],
        {})
    with pytest.raises(SdpError):
        solve(prob)


def test_problem_validation():
    with pytest.raises(SdpError):
        SdpProblem(["x", "x"], [], [], {})
    with pytest.raises(SdpError):
        SdpProblem(["x"], [], [], {"y": 1.0})
    with pytest.raises(SdpError):
        SdpProblem(["x"], [], [Block("b", 1, "weird", ("x",), lambda x: None)], {})
    with pytest.raises(SdpError):
        SdpProblem(["x"], [], [Block("b", 1, PSD, ("y",), lambda y: None)], {})
    with pytest.raises(SdpError):
        SdpProblem([], [MatrixVarFamily("P", 2, 1)],
                   [Block("b", 2, PSD, (("P", 3),), lambda P: P)], {})


def test_dump_problem_lists_structure(tmp_path):
    prob = scalar_lp(1.0, 0.0, 2.0)
    path = tmp_path / "prob.txt"
    dump_problem(prob, path)
    text = path.read_text()
    assert text.startswith("sdp-problem")
    assert "scalars: x" in text
    assert "block lower" in text and "block upper" in text
