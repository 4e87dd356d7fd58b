import numpy as np
import pytest

import ncmkit.lstm as lstm_mod
from ncmkit.lstm import DeepLstmModel, sigmoid
from ncmkit.metric import MetricSample, pack_theta, theta_size
from ncmkit.training import (
    DivergenceError,
    TrainConfig,
    gradient_check,
    sequence_loss,
    sequence_loss_and_grads,
    sequences_from_samples,
    train,
)


def spd_from_theta_seed(rng, n):
    U = np.triu(rng.standard_normal((n, n)))
    U[np.diag_indices(n)] = np.abs(U[np.diag_indices(n)]) + 0.5
    return U.T @ U


def make_samples(rng, n_traj=4, n_steps=5, n=2, wobble=0.0):
    """Small dataset; wobble > 0 varies the target within a trajectory."""
    samples = []
    for s in range(n_traj):
        base = spd_from_theta_seed(rng, n)
        for i in range(n_steps + 1):
            M = base + wobble * i * np.eye(n)
            samples.append(MetricSample(s, i, 0.1 * i, rng.standard_normal(n), M))
    return samples


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(hidden=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(test_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epsilon=0.0)


def test_sequences_grouped_and_ordered():
    rng = np.random.default_rng(0)
    samples = make_samples(rng, n_traj=3, n_steps=4)
    rng.shuffle(samples)
    seqs = sequences_from_samples(samples)
    assert len(seqs) == 3
    for x, th in seqs:
        assert x.shape == (5, 2)
        assert th.shape == (5, theta_size(2))
    with pytest.raises(ValueError):
        sequences_from_samples([])


def test_sequences_reject_nonfinite():
    M = np.eye(2)
    bad = [MetricSample(0, 0, 0.0, np.array([np.nan, 0.0]), M),
           MetricSample(0, 1, 0.1, np.zeros(2), M)]
    with pytest.raises(ValueError):
        sequences_from_samples(bad)


def test_constant_target_is_learned():
    # a constant theta is representable by the output bias alone
    rng = np.random.default_rng(1)
    M = spd_from_theta_seed(rng, 2)
    samples = [MetricSample(s, i, 0.1 * i, rng.standard_normal(2), M)
               for s in range(4) for i in range(6)]
    cfg = TrainConfig(hidden=8, layers=1, epochs=200, lr=0.1,
                      test_fraction=0.25, epsilon=1e-6, seed=0)
    model, hist = train(samples, cfg)
    assert hist["test_mse"][-1] < 1e-6
    assert hist["stopped_early"]
    pred = model.forward(rng.standard_normal((3, 2)))
    np.testing.assert_allclose(pred, np.tile(pack_theta(np.linalg.cholesky(M).T),
                                             (3, 1)), atol=1e-2)


def test_full_batch_descent_is_monotone():
    rng = np.random.default_rng(2)
    samples = make_samples(rng, n_traj=4, n_steps=5, wobble=0.2)
    cfg = TrainConfig(hidden=6, layers=1, epochs=8, lr=1e-3, batch_size=4,
                      test_fraction=0.0, epsilon=1e-12, seed=3)
    _, hist = train(samples, cfg)
    drops = np.diff(hist["train_mse"][:6])
    assert np.all(drops <= 1e-12)


def test_whole_trajectory_split():
    rng = np.random.default_rng(4)
    samples = make_samples(rng, n_traj=5, n_steps=3)
    cfg = TrainConfig(hidden=4, layers=1, epochs=1, lr=1e-3,
                      test_fraction=0.4, seed=0)
    _, hist = train(samples, cfg)
    assert hist["train_trajectories"] == 3
    assert hist["test_trajectories"] == 2


def test_divergence_raises():
    rng = np.random.default_rng(5)
    samples = make_samples(rng, n_traj=3, n_steps=4, wobble=0.3)
    cfg = TrainConfig(hidden=6, layers=1, epochs=50, lr=1e6,
                      test_fraction=0.0, epsilon=1e-12, seed=0)
    with pytest.raises(DivergenceError):
        train(samples, cfg)


def test_train_determinism():
    rng = np.random.default_rng(6)
    samples = make_samples(rng, n_traj=4, n_steps=4, wobble=0.1)
    cfg = TrainConfig(hidden=5, layers=2, epochs=5, lr=1e-2, seed=11)
    m1, h1 = train(samples, cfg)
    m2, h2 = train(samples, cfg)
    assert h1["train_mse"] == h2["train_mse"]
    for (_, a1), (_, a2) in zip(m1.all_params(), m2.all_params()):
        np.testing.assert_array_equal(a1, a2)


def test_gradient_check_small_model():
    rng = np.random.default_rng(7)
    model = DeepLstmModel(3, 4, 2, rng=rng)
    x_seq = rng.standard_normal((5, 3))
    theta_seq = rng.standard_normal((5, model.k))
    err = gradient_check(model, x_seq, theta_seq, n_checks=60, seed=0)
    assert err < 1e-5


def test_gradient_of_output_bias_closed_form():
    # zero-weight model: y = b_y, so d loss / d b_y = 2 mean residual
    model = DeepLstmModel(2, 4, 1)
    rng = np.random.default_rng(8)
    tn = rng.standard_normal((6, model.k))
    xn = rng.standard_normal((6, 2))
    _, grads = sequence_loss_and_grads(model, xn, tn)
    resid = np.tile(model.b_y, (6, 1)) - tn
    np.testing.assert_allclose(grads["b_y"], 2.0 * resid.mean(axis=0), rtol=1e-12)


def test_gradient_check_catches_peephole_mutation(monkeypatch):
    # reroute the output-gate peephole to the stale cell state; the BPTT
    # equations no longer describe the forward pass and the check must fail
    def mutant(layer, x, h_prev, c_prev):
        iota = sigmoid(layer.W_xi @ x + layer.W_hi @ h_prev
                       + layer.W_ci * c_prev + layer.b_i)
        f = sigmoid(layer.W_xf @ x + layer.W_hf @ h_prev
                    + layer.W_cf * c_prev + layer.b_f)
        g = np.tanh(layer.W_xc @ x + layer.W_hc @ h_prev + layer.b_c)
        c = f * c_prev + iota * g
        o = sigmoid(layer.W_xo @ x + layer.W_ho @ h_prev
                    + layer.W_co * c_prev + layer.b_o)
        tc = np.tanh(c)
        return o * tc, c, (x, h_prev, c_prev, iota, f, g, o, tc)

    rng = np.random.default_rng(9)
    model = DeepLstmModel(3, 4, 2, rng=rng)
    x_seq = rng.standard_normal((5, 3))
    theta_seq = rng.standard_normal((5, model.k))
    monkeypatch.setattr(lstm_mod, "_step_cached", mutant)
    err = gradient_check(model, x_seq, theta_seq, n_checks=60, seed=0)
    assert err > 1e-5


def test_sequence_loss_matches_manual():
    rng = np.random.default_rng(10)
    model = DeepLstmModel(2, 4, 1, rng=rng)
    xn = rng.standard_normal((4, 2))
    tn = rng.standard_normal((4, model.k))
    y, _ = model.forward_normalized(xn)
    assert sequence_loss(model, xn, tn) == pytest.approx(np.mean((y - tn) ** 2))
