"""Estimation loop, EKF baseline, control loop, and metric sources."""

import numpy as np
import pytest
import scipy.linalg

from ncmkit.control import (
    lqr_gain,
    ncm_controller,
    obstacle_clearances,
    simulate_control,
)
from ncmkit.dynamics import (
    Trajectory,
    ball_disturbance,
    integrate,
    make_linear_test,
    make_lorenz,
    make_spacecraft,
)
from ncmkit.estimation import (
    EkfEstimator,
    moving_average,
    ncm_estimator_step,
    simulate_estimation,
    stable_substeps,
)
from ncmkit.lstm import DeepLstmModel
from ncmkit.metric import MetricSample
from ncmkit.sources import (
    ConstantMetricSource,
    NcmMetricSource,
    SampledMetricSource,
)


# ---------------------------------------------------------------------------
# metric sources


def test_constant_source():
    src = ConstantMetricSource(2.0 * np.eye(2))
    np.testing.assert_array_equal(src.metric(np.zeros(2)), 2.0 * np.eye(2))
    with pytest.raises(ValueError):
        ConstantMetricSource(np.diag([1.0, -1.0]))


def test_sampled_source_nearest_neighbor():
    samples = [
        MetricSample(0, 0, 0.0, np.array([0.0, 0.0]), 1.0 * np.eye(2)),
        MetricSample(0, 1, 0.1, np.array([5.0, 0.0]), 3.0 * np.eye(2)),
    ]
    src = SampledMetricSource(samples)
    assert src.metric(np.array([0.4, 0.1]))[0, 0] == 1.0
    assert src.metric(np.array([4.0, -1.0]))[0, 0] == 3.0
    with pytest.raises(ValueError):
        SampledMetricSource([])
    bad = [MetricSample(0, 0, 0.0, np.zeros(2), -np.eye(2))]
    with pytest.raises(ValueError):
        SampledMetricSource(bad)


def test_ncm_source_is_stateful_until_reset():
    rng = np.random.default_rng(0)
    model = DeepLstmModel(2, 6, 1, rng=rng)
    src = NcmMetricSource(model)
    x = np.array([0.3, -0.8])
    first = src.metric(x)
    second = src.metric(x)  # recurrent state has moved on
    assert not np.allclose(first, second)
    src.reset()
    np.testing.assert_allclose(src.metric(x), first, rtol=1e-12)
    assert np.linalg.eigvalsh(first).min() > 0


# ---------------------------------------------------------------------------
# estimation


def test_stable_substeps():
    assert stable_substeps(10.0, 0.1) == 10  # floor dominates
    assert stable_substeps(5000.0, 0.1) == 200
    assert stable_substeps(0.0, 0.1) == 10


def test_estimator_step_without_innovation_is_unforced():
    sys = make_lorenz()
    x = np.array([1.0, 2.0, 3.0])
    y = sys.h(x, 0.0)  # estimate equals plant output: zero correction
    stepped = ncm_estimator_step(sys, np.eye(3), x, y, 0.0, 0.1, substeps=2)
    ref = integrate(sys, x, dt=0.1, n_steps=1, substeps=2).states[-1]
    np.testing.assert_allclose(stepped, ref, rtol=1e-12)


def test_estimator_step_rejects_indefinite_metric():
    sys = make_lorenz()
    with pytest.raises(ValueError):
        ncm_estimator_step(sys, np.diag([1.0, 1.0, -1.0]), np.zeros(3),
                           np.zeros(1), 0.0, 0.1)


def test_simulate_estimation_converges_linear():
    sys = make_linear_test(-1.0)
    src = ConstantMetricSource(4.0 * np.eye(1))
    run = simulate_estimation(sys, src, np.array([1.0]), np.array([-2.0]),
                              None, None, dt=0.1, n_steps=80, substeps=10)
    assert run.errors[0] == pytest.approx(3.0)
    # the held measurement lags the decaying plant, so the error floor is
    # a small multiple of |x(t)| rather than machine zero
    assert run.errors[-1] < 1e-4
    assert run.tag == "constant"
    assert np.all(np.isnan(run.bound))


def test_simulate_estimation_bound_series():
    sys = make_lorenz()
    src = ConstantMetricSource(np.eye(3))
    d1 = ball_disturbance(3, 0.5, seed=0)
    d2 = ball_disturbance(1, 0.5, seed=1)
    run = simulate_estimation(sys, src, np.array([-1.0, 2.0, 3.0]),
                              np.array([0.0, 1.0, 1.0]), d1, d2,
                              dt=0.1, n_steps=30, substeps=10,
                              bound_params={"chi": 4.0, "nu": 10.0, "gamma": 2.0,
                                            "d1_max": 0.5, "d2_max": 0.5})
    ss = (0.5 * 4.0 + 0.5 * 10.0) / 2.0
    e0 = np.linalg.norm(np.array([-1.0, 2.0, 3.0]) - np.array([0.0, 1.0, 1.0]))
    expect_last = np.sqrt(4.0) * e0 * np.exp(-2.0 * 3.0) + ss
    assert run.bound[-1] == pytest.approx(expect_last, rel=1e-12)
    assert run.bound[0] == pytest.approx(np.sqrt(4.0) * e0 + ss, rel=1e-12)
    assert run.bound[0] > run.bound[-1]


def test_estimation_csv_round_trip(tmp_path):
    sys = make_linear_test(-1.0)
    run = simulate_estimation(sys, ConstantMetricSource(np.eye(1)),
                              np.array([1.0]), np.array([0.0]), None, None,
                              dt=0.1, n_steps=5)
    path = tmp_path / "run.csv"
    run.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "t,x0,xhat0,error,bound"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (6, 5)
    np.testing.assert_allclose(data[:, 3], run.errors, rtol=1e-15)


def test_moving_average_window_behavior():
    series = np.ones(10)
    np.testing.assert_allclose(moving_average(series, 15), series)
    ramp = np.arange(10.0)
    sm = moving_average(ramp, 3)
    assert sm[5] == pytest.approx(5.0)  # interior centered mean
    assert sm[0] == pytest.approx(0.5)  # shrunken edge window
    with pytest.raises(ValueError):
        moving_average(ramp, 0)


def test_steady_state_error_window():
    sys = make_linear_test(-1.0)
    run = simulate_estimation(sys, ConstantMetricSource(np.eye(1)),
                              np.array([1.0]), np.array([0.0]), None, None,
                              dt=0.1, n_steps=20)
    assert run.steady_state_error(1.5) < run.steady_state_error(0.0)
    with pytest.raises(ValueError):
        run.steady_state_error(100.0)


# ---------------------------------------------------------------------------
# EKF


def test_ekf_requires_pd_weights():
    sys = make_linear_test(-1.0)
    with pytest.raises(ValueError):
        EkfEstimator(sys, np.zeros((1, 1)), np.eye(1))


def test_ekf_covariance_reaches_riccati_fixed_point():
    sys = make_linear_test(-0.5)
    Q = 2.0 * np.eye(1)
    R = 0.5 * np.eye(1)
    ekf = EkfEstimator(sys, Q, R)
    for k in range(3000):
        ekf.advance_covariance(np.zeros(1), 0.0, 1e-3)
    P_ref = scipy.linalg.solve_continuous_are(
        sys.A(np.zeros(1), 0.0).T, sys.C(np.zeros(1), 0.0).T, Q, R)
    assert abs(ekf.P[0, 0] - P_ref[0, 0]) < 1e-4
    assert ekf.resets == 0


def test_ekf_estimate_converges():
    sys = make_linear_test(-1.0)
    ekf = EkfEstimator(sys, np.eye(1), 0.1 * np.eye(1))
    run = simulate_estimation(sys, ekf, np.array([2.0]), np.array([-1.0]),
                              None, None, dt=0.1, n_steps=60, substeps=10)
    assert run.tag == "ekf"
    assert run.errors[-1] < 1e-3  # held-measurement lag floor, as above
    assert run.covariance_resets == 0


def test_ekf_reset_on_lost_definiteness():
    sys = make_linear_test(-1.0)
    ekf = EkfEstimator(sys, np.eye(1), np.eye(1))
    ekf.P = np.array([[1e9]])
    # a huge covariance with a coarse Euler step drives P negative
    with pytest.warns(UserWarning, match="positive definiteness"):
        ekf.advance_covariance(np.zeros(1), 0.0, 0.5)
    assert ekf.resets == 1
    assert np.linalg.eigvalsh(ekf.P).min() > 0


# ---------------------------------------------------------------------------
# control


def double_integrator_plan(sys, n_steps=20, dt=0.1):
    times = dt * np.arange(n_steps + 1)
    states = np.zeros((n_steps + 1, sys.n))
    inputs = np.zeros((n_steps + 1, sys.m))
    return Trajectory(times=times, states=states, inputs=inputs)


def test_ncm_controller_regulates_linear():
    sys = make_linear_test(0.5)  # open-loop unstable
    policy = ncm_controller(sys, ConstantMetricSource(2.0 * np.eye(1)))
    # u = -B1' M x = -2x, so the closed loop is xdot = -1.5x
    assert policy(np.array([1.0]))[0] == pytest.approx(-2.0)
    traj = integrate(sys, np.array([1.0]), u_policy=policy, dt=0.05, n_steps=100)
    assert abs(traj.states[-1, 0]) < 0.1


def test_ncm_controller_requires_actuation():
    with pytest.raises(ValueError):
        ncm_controller(make_lorenz(), ConstantMetricSource(np.eye(3)))


def test_simulate_control_tracks_without_disturbance():
    sys = make_spacecraft()
    plan = double_integrator_plan(sys)
    run = simulate_control(sys, plan, np.zeros((sys.m, sys.n)), None,
                           clamp=None, substeps=1)
    assert run.tag == "lqr"
    assert run.max_deviation() < 1e-12
    assert run.violation_count() == 0
    assert run.effort == pytest.approx(0.0)


def test_simulate_control_clamps_inputs():
    sys = make_spacecraft()
    plan = double_integrator_plan(sys, n_steps=10)
    src = ConstantMetricSource(50.0 * np.eye(6))
    d = ball_disturbance(6, 0.15, seed=3)
    run = simulate_control(sys, plan, src, d, tube=10.0, clamp=(0.0, 1.0))
    assert run.input_min >= 0.0
    assert run.input_max <= 1.0
    assert run.tag == "constant"
    assert run.violation_count() == 0


def test_simulate_control_counts_tube_violations():
    sys = make_spacecraft()
    plan = double_integrator_plan(sys, n_steps=10)
    d = ball_disturbance(6, 0.5, seed=1)
    run = simulate_control(sys, plan, np.zeros((sys.m, sys.n)), d, tube=1e-6)
    assert run.violation_count() > 0
    assert run.summary()["violations"] == int(np.count_nonzero(run.violations))


def test_control_effort_trapezoid():
    sys = make_linear_test(-1.0)
    n_steps, dt = 4, 0.1
    times = dt * np.arange(n_steps + 1)
    plan = Trajectory(times=times, states=np.zeros((n_steps + 1, 1)),
                      inputs=np.ones((n_steps + 1, 1)))
    run = simulate_control(sys, plan, np.zeros((1, 1)), None, clamp=None)
    # all inputs are 1: trapezoid of u^2 over [0, 0.4]
    assert run.effort == pytest.approx(0.4)


def test_control_csv_layout(tmp_path):
    sys = make_linear_test(-1.0)
    plan = Trajectory(times=0.1 * np.arange(3), states=np.zeros((3, 1)),
                      inputs=np.zeros((3, 1)))
    run = simulate_control(sys, plan, np.zeros((1, 1)), None)
    path = tmp_path / "run.csv"
    run.to_csv(path)
    assert path.read_text().splitlines()[0] == "t,xd0,x0,u0,deviation,violation"


def test_obstacle_clearances_hand_values():
    states = np.array([[0.0, 0.0, 9.9], [3.0, 4.0, -1.0]])
    obstacles = [(0.0, 0.0, 1.0), (3.0, 0.0, 0.5)]
    clear = obstacle_clearances(states, obstacles)
    assert clear[0] == pytest.approx(-1.0)  # inside the first circle
    assert clear[1] == pytest.approx(min(5.0 - 1.0, 4.0 - 0.5))


def test_lqr_gain_matches_scipy_are():
    rng = np.random.default_rng(12)
    for _ in range(5):
        A = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 2))
        Q = 2.4 * np.eye(3)
        R = np.eye(2)
        K = lqr_gain(A, B, Q, R)
        P = scipy.linalg.solve_continuous_are(A, B, Q, R)
        np.testing.assert_allclose(K, np.linalg.solve(R, B.T @ P),
                                   rtol=1e-6, atol=1e-8)
        cl = np.linalg.eigvals(A - B @ K)
        assert np.max(cl.real) < 0


def test_lqr_gain_rejects_unstabilizable_pair():
    A = np.array([[1.0]])
    B = np.array([[0.0]])
    with pytest.raises(ValueError):
        lqr_gain(A, B, np.eye(1), np.eye(1))
