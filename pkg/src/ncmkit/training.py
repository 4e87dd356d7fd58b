"""Training for the metric regressor: full BPTT with plain SGD.

Gradients are derived by hand from the peephole recurrence.  Writing s'
for sigmoid'(a) = s(1-s) and starting from the upstream dh at step t:

    da_o = dh * tanh(c) * o(1-o)
    dc   = dh * o * (1 - tanh(c)^2) + da_o * W_co + dc_from_future
    da_f = dc * c_prev * f(1-f)
    da_i = dc * g * iota(1-iota)
    da_g = dc * iota * (1 - g^2)
    dc_prev = dc * f + da_i * W_ci + da_f * W_cf
    dh_prev = W_hi'da_i + W_hf'da_f + W_hc'da_g + W_ho'da_o

The output-gate peephole reads the new cell state, so its weight gradient
uses c while the input/forget peepholes use c_prev.  Updates are SGD with
one trajectory sequence per step by default; classical momentum and
global-norm gradient clipping are available and off by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lstm import DeepLstmModel, LAYER_MATS, LAYER_PARAMS


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    hidden: int = 64
    layers: int = 2
    epochs: int = 500
    lr: float = 1e-2
    batch_size: int = 1
    test_fraction: float = 0.2
    epsilon: float = 1e-2
    seed: int = 0
    time_input: bool = False
    momentum: float = 0.0
    clip: float = 0.0

    def __post_init__(self):
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden and layers must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("lr and epsilon must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip < 0:
            raise ValueError("clip must be nonnegative (0 disables)")


def sequences_from_samples(samples, time_input=False):
    """Group metric samples into per-trajectory (x_seq, theta_seq) pairs.

    Rows are ordered by step index within each trajectory; trajectories
    are ordered by index.  Non-finite data is rejected.
    """
    by_s = {}
    for smp in samples:
        by_s.setdefault(smp.s, []).append(smp)
    seqs = []
    for s in sorted(by_s):
        rows = sorted(by_s[s], key=lambda r: r.i)
        x = np.array([r.x for r in rows], dtype=float)
        if time_input:
            x = np.hstack([x, np.array([[r.t] for r in rows])])
        th = np.array([r.theta() for r in rows])
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(th))):
            raise ValueError(f"non-finite training data in trajectory {s}")
        seqs.append((x, th))
    if not seqs:
        raise ValueError("no training sequences")
    return seqs


def _zero_grads(model):
    layers = []
    for layer in model.layers:
        layers.append({name: np.zeros_like(getattr(layer, name)) for name in LAYER_PARAMS})
    return {"layers": layers, "W_hy": np.zeros_like(model.W_hy),
            "b_y": np.zeros_like(model.b_y)}


def _layer_backward(layer, steps, dh_seq, g):
    """Backward pass through one layer; returns gradients w.r.t. the
    layer inputs and accumulates parameter gradients into g."""
    T = len(steps)
    dx_seq = np.zeros((T, layer.in_dim))
    dh_next = np.zeros(layer.hidden)
    dc_next = np.zeros(layer.hidden)
    for t in range(T - 1, -1, -1):
        (x, h_prev, c_prev, iota, f, gate_g, o, tc), c = steps[t]
        dh = dh_seq[t] + dh_next
        da_o = dh * tc * o * (1.0 - o)
        dc = dh * o * (1.0 - tc * tc) + da_o * layer.W_co + dc_next
        da_f = dc * c_prev * f * (1.0 - f)
        da_i = dc * gate_g * iota * (1.0 - iota)
        da_g = dc * iota * (1.0 - gate_g * gate_g)

        g["W_xi"] += np.outer(da_i, x)
        g["W_hi"] += np.outer(da_i, h_prev)
        g["W_ci"] += da_i * c_prev
        g["b_i"] += da_i
        g["W_xf"] += np.outer(da_f, x)
        g["W_hf"] += np.outer(da_f, h_prev)
        g["W_cf"] += da_f * c_prev
        g["b_f"] += da_f
        g["W_xc"] += np.outer(da_g, x)
        g["W_hc"] += np.outer(da_g, h_prev)
        g["b_c"] += da_g
        g["W_xo"] += np.outer(da_o, x)
        g["W_ho"] += np.outer(da_o, h_prev)
        g["W_co"] += da_o * c
        g["b_o"] += da_o

        dh_next = (layer.W_hi.T @ da_i + layer.W_hf.T @ da_f
                   + layer.W_hc.T @ da_g + layer.W_ho.T @ da_o)
        dx_seq[t] = (layer.W_xi.T @ da_i + layer.W_xf.T @ da_f
                     + layer.W_xc.T @ da_g + layer.W_xo.T @ da_o)
        dc_next = dc * f + da_i * layer.W_ci + da_f * layer.W_cf
    return dx_seq


def sequence_loss(model, xn_seq, tn_seq):
    """Mean squared error over all steps and components, normalized units."""
    y, _ = model.forward_normalized(xn_seq)
    return float(np.mean((y - tn_seq) ** 2))


def sequence_loss_and_grads(model, xn_seq, tn_seq):
    cache = []
    y, h_top = model.forward_normalized(xn_seq, cache=cache)
    resid = y - tn_seq
    loss = float(np.mean(resid ** 2))
    grads = _zero_grads(model)
    dy = (2.0 / resid.size) * resid
    grads["W_hy"] += dy.T @ h_top
    grads["b_y"] += dy.sum(axis=0)
    dh_seq = dy @ model.W_hy
    for li in range(len(model.layers) - 1, -1, -1):
        dh_seq = _layer_backward(model.layers[li], cache[li], dh_seq, grads["layers"][li])
    return loss, grads


def _apply_grads(model, grads, lr):
    for layer, g in zip(model.layers, grads["layers"]):
        for name in LAYER_PARAMS:
            getattr(layer, name)[...] -= lr * g[name]
    model.W_hy -= lr * grads["W_hy"]
    model.b_y -= lr * grads["b_y"]


def _accumulate(total, grads, weight):
    for tl, gl in zip(total["layers"], grads["layers"]):
        for name in LAYER_PARAMS:
            tl[name] += weight * gl[name]
    total["W_hy"] += weight * grads["W_hy"]
    total["b_y"] += weight * grads["b_y"]


def _scale_grads(grads, factor):
    for gl in grads["layers"]:
        for name in LAYER_PARAMS:
            gl[name] *= factor
    grads["W_hy"] *= factor
    grads["b_y"] *= factor


def _grad_norm(grads):
    total = float(np.sum(grads["W_hy"] ** 2)) + float(np.sum(grads["b_y"] ** 2))
    for gl in grads["layers"]:
        for name in LAYER_PARAMS:
            total += float(np.sum(gl[name] ** 2))
    return np.sqrt(total)


def evaluate(model, norm_seqs):
    """Mean over sequences of the per-sequence normalized MSE."""
    return float(np.mean([sequence_loss(model, xn, tn) for xn, tn in norm_seqs]))


def train(samples, config, progress=None):
    """Fit a metric regressor to sampled metrics.

    The trajectory set is split into train and test groups (whole
    trajectories, never individual rows), inputs and targets are
    standardized per component on the training group, and SGD runs until
    the epoch budget or until the test MSE drops below config.epsilon.
    Returns (model, history) where history records per-epoch train and
    test MSE in normalized units.
    """
    seqs = sequences_from_samples(samples, time_input=config.time_input)
    n = seqs[0][0].shape[1] - (1 if config.time_input else 0)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(seqs))
    n_test = int(round(config.test_fraction * len(seqs))) if config.test_fraction > 0 else 0
    n_test = min(n_test, len(seqs) - 1)
    test_ids = sorted(perm[:n_test])
    train_ids = sorted(perm[n_test:])

    x_rows = np.vstack([seqs[i][0] for i in train_ids])
    t_rows = np.vstack([seqs[i][1] for i in train_ids])
    x_std = x_rows.std(axis=0)
    t_std = t_rows.std(axis=0)
    model = DeepLstmModel(n, config.hidden, config.layers, rng=rng,
                          seed=config.seed, time_input=config.time_input)
    model.set_normalizer(x_rows.mean(axis=0), np.where(x_std > 1e-12, x_std, 1.0),
                         t_rows.mean(axis=0), np.where(t_std > 1e-12, t_std, 1.0))

    norm = [(model.normalize_x(x), model.normalize_theta(t)) for x, t in seqs]
    train_seqs = [norm[i] for i in train_ids]
    test_seqs = [norm[i] for i in test_ids] or train_seqs

    velocity = _zero_grads(model) if config.momentum > 0 else None

    def sgd_step(grads, scale):
        if scale != 1.0:
            _scale_grads(grads, scale)
        if config.clip > 0:
            norm = _grad_norm(grads)
            if norm > config.clip:
                _scale_grads(grads, config.clip / norm)
        if velocity is None:
            _apply_grads(model, grads, config.lr)
        else:
            _scale_grads(velocity, config.momentum)
            _accumulate(velocity, grads, 1.0)
            _apply_grads(model, velocity, config.lr)

    history = {"train_mse": [], "test_mse": [], "epochs": 0, "stopped_early": False,
               "train_trajectories": len(train_ids), "test_trajectories": len(test_ids)}
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_seqs))
        losses = []
        pending = None
        pending_count = 0
        for j in order:
            xn, tn = train_seqs[j]
            loss, grads = sequence_loss_and_grads(model, xn, tn)
            losses.append(loss)
            if config.batch_size == 1:
                sgd_step(grads, 1.0)
            else:
                if pending is None:
                    pending = _zero_grads(model)
                _accumulate(pending, grads, 1.0)
                pending_count += 1
                if pending_count == config.batch_size:
                    sgd_step(pending, 1.0 / pending_count)
                    pending = None
                    pending_count = 0
        if pending is not None:
            sgd_step(pending, 1.0 / pending_count)
        train_mse = float(np.mean(losses))
        test_mse = evaluate(model, test_seqs)
        history["train_mse"].append(train_mse)
        history["test_mse"].append(test_mse)
        history["epochs"] = epoch + 1
        if progress is not None:
            progress(epoch, train_mse, test_mse)
        if not (np.isfinite(train_mse) and np.isfinite(test_mse)):
            raise DivergenceError(
                f"training loss became non-finite at epoch {epoch}; "
                f"try a smaller learning rate than {config.lr}")
        if test_mse < config.epsilon:
            history["stopped_early"] = True
            break
    return model, history


def _flat_grads(model, grads):
    out = []
    for li in range(len(model.layers)):
        out.extend((f"layer{li}.{name}", grads["layers"][li][name]) for name in LAYER_PARAMS)
    out.append(("W_hy", grads["W_hy"]))
    out.append(("b_y", grads["b_y"]))
    return out


def gradient_check(model, x_seq, theta_seq, n_checks=200, step=1e-6, seed=0):
    """Compare analytic BPTT gradients against central differences.

    Perturbs a random subset of individual weights in place (restoring
    each exactly) and returns the maximum relative error, with small
    denominators floored so finite-difference noise on near-zero
    gradients is judged in absolute terms.
    """
    xn = model.normalize_x(np.asarray(x_seq, dtype=float))
    tn = model.normalize_theta(np.asarray(theta_seq, dtype=float))
    _, grads = sequence_loss_and_grads(model, xn, tn)
    flat_g = _flat_grads(model, grads)
    params = model.all_params()
    sizes = [arr.size for _, arr in params]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_checks, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in picks:
        pi = int(np.searchsorted(bounds, flat_idx, side="right") - 1)
        local = int(flat_idx - bounds[pi])
        arr = params[pi][1]
        old = arr.flat[local]
        arr.flat[local] = old + step
        lo_hi = sequence_loss(model, xn, tn)
        arr.flat[local] = old - step
        lo_lo = sequence_loss(model, xn, tn)
        arr.flat[local] = old
        fd = (lo_hi - lo_lo) / (2.0 * step)
        an = flat_g[pi][1].flat[local]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
        worst = max(worst, err)
    return worst
