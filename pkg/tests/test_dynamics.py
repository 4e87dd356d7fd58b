import numpy as np
import pytest

from ncmkit.dynamics import (
    IntegrationDivergedError,
    Trajectory,
    ball_disturbance,
    finite_difference_jacobian,
    get_system,
    integrate,
    make_linear_test,
    make_lorenz,
    make_spacecraft,
    rk4_step,
)


def test_lorenz_field_values():
    sys = make_lorenz()
    assert np.allclose(sys.f(np.zeros(3), 0.0), 0.0)
    # sigma=10, beta=8/3, rho=28 by direct substitution
    np.testing.assert_allclose(sys.f(np.array([1.0, 1.0, 1.0]), 0.0),
                               [0.0, 26.0, 1.0 - 8.0 / 3.0])
    A = sys.A(np.array([1.0, 1.0, 1.0]), 0.0)
    np.testing.assert_allclose(A[0], [-10.0, 10.0, 0.0])


def test_jacobians_match_finite_differences():
    systems = [make_lorenz(), make_spacecraft(), make_linear_test(-1.0)]
    for sys in systems:
        rng = np.random.default_rng(42)
        for _ in range(100):
            x = rng.uniform(-5.0, 5.0, sys.n)
            J = finite_difference_jacobian(sys.f, x, 0.0)
            assert np.max(np.abs(J - sys.A(x, 0.0))) < 1e-5 * max(1.0, np.abs(J).max())
            Jh = finite_difference_jacobian(sys.h, x, 0.0)
            assert np.max(np.abs(Jh - sys.C(x, 0.0))) < 1e-5 * max(1.0, np.abs(Jh).max())


def test_channel_norm_bounds():
    for sys in (make_lorenz(), make_spacecraft(), make_linear_test(0.5)):
        rng = np.random.default_rng(1)
        b = sys.bounds
        for _ in range(20):
            x = rng.uniform(-5.0, 5.0, sys.n)
            assert np.linalg.norm(sys.B(x, 0.0), 2) <= b.b_max + 1e-12
            assert np.linalg.norm(sys.C(x, 0.0), 2) <= b.c_max + 1e-12
            assert np.linalg.norm(sys.G(x, 0.0), 2) <= b.g_max + 1e-12


def test_spacecraft_structure():
    sys = make_spacecraft()
    A = sys.A(np.zeros(6), 0.0)
    nz = np.argwhere(A != 0.0)
    assert len(nz) == 3
    assert {tuple(rc) for rc in nz} == {(0, 3), (1, 4), (2, 5)}
    assert np.all(A[A != 0.0] == 1.0)
    # pure drift
    x = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(sys.f(x, 0.0), [1.0, 0, 0, 0, 0, 0])
    # sdc form is exact for the double integrator
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal(6)
        np.testing.assert_allclose(sys.sdc_A(x, 0.0) @ x, sys.f(x, 0.0))


def test_spacecraft_thruster_geometry():
    sys = make_spacecraft()
    # column norm bound sqrt(1 + 0.5^2): unit thrust with lever arm 0.5
    B0 = sys.B1(np.zeros(6), 0.0)
    norms = np.linalg.norm(B0[3:], axis=0)
    assert np.all(norms <= np.sqrt(1.25) + 1e-12)
    assert B0[:3].max() == 0.0  # forces act on the velocity states only
    # the force block rotates with yaw, so the actuation Gram is constant
    for phi in (0.0, 0.7, np.pi / 2, 2.5):
        x = np.array([0.0, 0.0, phi, 0.0, 0.0, 0.0])
        Bv = sys.B1(x, 0.0)[3:]
        np.testing.assert_allclose(Bv @ Bv.T, np.diag([4.0, 4.0, 2.0]),
                                   atol=1e-12)


def test_linear_test_system():
    sys = make_linear_test(-1.0)
    assert sys.f(np.array([2.0]), 0.0) == pytest.approx(-2.0)
    assert sys.A(np.array([2.0]), 0.0)[0, 0] == pytest.approx(-1.0)
    assert make_linear_test(0.5).f(np.array([2.0]), 0.0) == pytest.approx(1.0)


def test_get_system_names():
    assert get_system("lorenz").name == "lorenz"
    assert get_system("spacecraft").name == "spacecraft"
    assert get_system("linear:-2.5").A(np.zeros(1), 0.0)[0, 0] == -2.5
    with pytest.raises(ValueError):
        get_system("pendulum")


def test_rk4_order():
    # on xdot = -x the endpoint error should drop ~16x per halving
    field = lambda x, t: -x
    errs = []
    for n_steps in (10, 20, 40, 80):
        x = np.array([1.0])
        h = 1.0 / n_steps
        for k in range(n_steps):
            x = rk4_step(field, x, k * h, h)
        errs.append(abs(x[0] - np.exp(-1.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 3.8)


def test_integrate_matches_exponential():
    sys = make_linear_test(-1.0)
    traj = integrate(sys, np.array([1.0]), dt=0.1, n_steps=10)
    assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)
    assert traj.times.shape == (11,)


def test_integrate_validations():
    sys = make_linear_test(-1.0)
    with pytest.raises(ValueError):
        integrate(sys, np.array([1.0]), dt=0.1, n_steps=0)
    with pytest.raises(ValueError):
        integrate(sys, np.array([1.0]), dt=-0.1, n_steps=5)
    with pytest.raises(ValueError):
        integrate(sys, np.zeros(2), dt=0.1, n_steps=5)


def test_integrate_divergence_raises():
    # xdot = 50 x at dt=1 puts RK4 far outside its stability region
    sys = make_linear_test(50.0)
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(IntegrationDivergedError):
        integrate(sys, np.array([1.0]), dt=1.0, n_steps=400)


def test_lorenz_stays_on_attractor():
    sys = make_lorenz()
    traj = integrate(sys, np.array([-1.0, 2.0, 3.0]), dt=0.1, n_steps=500)
    assert np.all(np.isfinite(traj.states))
    assert np.max(np.abs(traj.states)) < 100.0


def test_integrate_records_zoh_inputs():
    sys = make_linear_test(-1.0)
    policy = lambda x, t: np.array([0.5])
    traj = integrate(sys, np.array([0.0]), u_policy=policy, dt=0.1, n_steps=5)
    assert traj.inputs.shape == (6, 1)
    assert np.all(traj.inputs == 0.5)
    # xdot = -x + 0.5 settles toward 0.5
    assert traj.states[-1, 0] == pytest.approx(0.5 * (1 - np.exp(-0.5)), abs=1e-6)


def test_trajectory_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        Trajectory(times=np.array([0.0, 0.1, 0.15]), states=np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Trajectory(times=np.array([0.0, 0.1]), states=np.zeros((3, 2)))
    rng = np.random.default_rng(0)
    traj = Trajectory(times=0.1 * np.arange(4), states=rng.standard_normal((4, 2)),
                      inputs=rng.standard_normal((4, 3)))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    np.testing.assert_allclose(back.times, traj.times, rtol=1e-15)
    np.testing.assert_allclose(back.states, traj.states, rtol=1e-15)
    np.testing.assert_allclose(back.inputs, traj.inputs, rtol=1e-15)
    assert back.disturbances is None


def test_ball_disturbance_properties():
    sig = ball_disturbance(3, 2.0, seed=9)
    v1 = sig(0.0)
    assert np.linalg.norm(v1) == pytest.approx(2.0)
    # held value on repeated query, fresh draw at a new time
    np.testing.assert_array_equal(sig(0.0), v1)
    assert not np.allclose(sig(0.1), v1)
    # deterministic across instances
    sig2 = ball_disturbance(3, 2.0, seed=9)
    np.testing.assert_array_equal(sig2(0.0), v1)
