"""Peephole LSTM regressor mapping state sequences to packed metric factors.

The recurrence follows the peephole formulation exactly: the input and
forget gates see the previous cell state, the output gate sees the new
cell state, and all peephole connections are diagonal:

    iota = sigmoid(W_xi x + W_hi h' + W_ci c' + b_i)
    f    = sigmoid(W_xf x + W_hf h' + W_cf c' + b_f)
    c    = f * c' + iota * tanh(W_xc x + W_hc h' + b_c)
    o    = sigmoid(W_xo x + W_ho h' + W_co c + b_o)
    h    = o * tanh(c)

Layers are stacked by feeding h upward; a linear readout y = W_hy h + b_y
produces the packed Cholesky entries in normalized units.  Everything is
plain numpy; training lives in the training module.
"""

from __future__ import annotations

import numpy as np

from .metric import theta_size, theta_to_metric

# parameter names in canonical order, used by SGD, gradient checks, and
# the checkpoint format
LAYER_MATS = ("W_xi", "W_hi", "W_xf", "W_hf", "W_xc", "W_hc", "W_xo", "W_ho")
LAYER_VECS = ("W_ci", "W_cf", "W_co", "b_i", "b_f", "b_c", "b_o")
LAYER_PARAMS = LAYER_MATS + LAYER_VECS

PD_EPS = 1e-6  # lower clamp for predicted Cholesky diagonals


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LstmLayer:
    """One peephole LSTM layer with input size in_dim and width hidden."""

    def __init__(self, in_dim, hidden, rng=None):
        self.in_dim = in_dim
        self.hidden = hidden
        scale = 1.0 / np.sqrt(hidden)
        if rng is None:
            draw = lambda *shape: np.zeros(shape)
        else:
            draw = lambda *shape: rng.uniform(-scale, scale, shape)
        for name in LAYER_MATS:
            cols = in_dim if name.startswith("W_x") else hidden
            setattr(self, name, draw(hidden, cols))
        for name in LAYER_VECS:
            setattr(self, name, draw(hidden))
        self.b_f = self.b_f + 1.0  # open the forget gate initially

    def params(self):
        return [(name, getattr(self, name)) for name in LAYER_PARAMS]


def lstm_step(layer, x, h_prev, c_prev):
    """One recurrence step; returns (h, c)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (layer.in_dim,) or h_prev.shape != (layer.hidden,) \
            or c_prev.shape != (layer.hidden,):
        raise ValueError("lstm_step: shape mismatch with layer dimensions")
    h, c = _step_cached(layer, x, h_prev, c_prev)[:2]
    return h, c


def _step_cached(layer, x, h_prev, c_prev):
    """Step returning (h, c, cache) with the intermediates BPTT needs."""
    iota = sigmoid(layer.W_xi @ x + layer.W_hi @ h_prev + layer.W_ci * c_prev + layer.b_i)
    f = sigmoid(layer.W_xf @ x + layer.W_hf @ h_prev + layer.W_cf * c_prev + layer.b_f)
    g = np.tanh(layer.W_xc @ x + layer.W_hc @ h_prev + layer.b_c)
    c = f * c_prev + iota * g
    o = sigmoid(layer.W_xo @ x + layer.W_ho @ h_prev + layer.W_co * c + layer.b_o)
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, iota, f, g, o, tc)


class DeepLstmModel:
    """Stacked peephole LSTM with a linear readout and I/O normalizers.

    n is the state dimension of the metric being predicted; in_dim may be
    n+1 when a trailing time channel is in use.
    """

    def __init__(self, n, hidden, layers, rng=None, seed=None, time_input=False):
        if rng is None and seed is not None:
            rng = np.random.default_rng(seed)
        self.n = n
        self.k = theta_size(n)
        self.hidden = hidden
        self.n_layers = layers
        self.seed = seed
        self.time_input = bool(time_input)
        self.in_dim = n + (1 if time_input else 0)
        self.layers = []
        dim = self.in_dim
        for _ in range(layers):
            self.layers.append(LstmLayer(dim, hidden, rng))
            dim = hidden
        scale = 1.0 / np.sqrt(hidden)
        if rng is None:
            self.W_hy = np.zeros((self.k, hidden))
            self.b_y = np.zeros(self.k)
        else:
            self.W_hy = rng.uniform(-scale, scale, (self.k, hidden))
            self.b_y = rng.uniform(-scale, scale, self.k)
        self.x_mean = np.zeros(self.in_dim)
        self.x_scale = np.ones(self.in_dim)
        self.theta_mean = np.zeros(self.k)
        self.theta_scale = np.ones(self.k)

    # -- normalization ----------------------------------------------------
    def set_normalizer(self, x_mean, x_scale, theta_mean, theta_scale):
        for arr, size, name in ((x_mean, self.in_dim, "x_mean"),
                                (x_scale, self.in_dim, "x_scale"),
                                (theta_mean, self.k, "theta_mean"),
                                (theta_scale, self.k, "theta_scale")):
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (size,):
                raise ValueError(f"{name} must have shape ({size},)")
            setattr(self, name, arr.copy())
        if np.any(self.x_scale <= 0) or np.any(self.theta_scale <= 0):
            raise ValueError("normalizer scales must be strictly positive")

    def normalize_x(self, x_seq):
        return (np.atleast_2d(x_seq) - self.x_mean) / self.x_scale

    def normalize_theta(self, t_seq):
        return (np.atleast_2d(t_seq) - self.theta_mean) / self.theta_scale

    def denormalize_theta(self, y_seq):
        return y_seq * self.theta_scale + self.theta_mean

    # -- inference --------------------------------------------------------
    def forward_normalized(self, xn_seq, cache=None):
        """Run the stack on already normalized inputs; optionally fill a
        per-layer cache list for backpropagation."""
        T = xn_seq.shape[0]
        seq = xn_seq
        hs = np.zeros((T, self.hidden))
        for layer in self.layers:
            h = np.zeros(layer.hidden)
            c = np.zeros(layer.hidden)
            steps = []
            for t in range(T):
                h, c, step_cache = _step_cached(layer, seq[t], h, c)
                hs[t] = h
                steps.append((step_cache, c))
            if cache is not None:
                cache.append(steps)
            seq = hs.copy()
        return seq @ self.W_hy.T + self.b_y, seq

    def forward(self, x_seq):
        """Map a raw state sequence (T, in_dim) to theta rows (T, k)."""
        x_seq = np.atleast_2d(np.asarray(x_seq, dtype=float))
        if x_seq.shape[1] != self.in_dim:
            raise ValueError(f"expected input rows of length {self.in_dim}")
        y, _ = self.forward_normalized(self.normalize_x(x_seq))
        return self.denormalize_theta(y)

    def make_stream(self):
        return LstmStream(self)

    def output_params(self):
        return [("W_hy", self.W_hy), ("b_y", self.b_y)]

    def all_params(self):
        """Flat (label, array) list in canonical order."""
        out = []
        for li, layer in enumerate(self.layers):
            out.extend((f"layer{li}.{name}", arr) for name, arr in layer.params())
        out.extend(self.output_params())
        return out

    # -- persistence ------------------------------------------------------
    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


class LstmStream:
    """Stateful step-by-step evaluation for online use.

    One stream per concurrent run; feeding a sequence step by step gives
    exactly the whole-sequence forward outputs.
    """

    def __init__(self, model):
        self.model = model
        self.reset()

    def reset(self):
        self.h = [np.zeros(l.hidden) for l in self.model.layers]
        self.c = [np.zeros(l.hidden) for l in self.model.layers]

    def step(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.model.in_dim,):
            raise ValueError(f"expected input of length {self.model.in_dim}")
        inp = (x - self.model.x_mean) / self.model.x_scale
        for i, layer in enumerate(self.model.layers):
            self.h[i], self.c[i] = lstm_step(layer, inp, self.h[i], self.c[i])
            inp = self.h[i]
        y = self.model.W_hy @ inp + self.model.b_y
        return self.model.denormalize_theta(y[None, :])[0]


def predict_metric(model_or_stream, x):
    """Metric prediction with guaranteed positive definiteness.

    For a DeepLstmModel, x is a (T, in_dim) sequence and the last row's
    prediction is used; for an LstmStream, x is a single state and the
    stream advances one step.  Diagonal factor entries are clamped below
    at PD_EPS so the reconstructed M = U'U is always PD.
    """
    if isinstance(model_or_stream, LstmStream):
        theta = model_or_stream.step(x)
        n = model_or_stream.model.n
    else:
        theta = model_or_stream.forward(x)[-1]
        n = model_or_stream.n
    return theta_to_metric(theta, n, min_diag=PD_EPS)


# ---------------------------------------------------------------------------
# checkpoint format: plain text, 17 significant digits, canonical order


def _write_array(fh, name, arr):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        fh.write(f"{name} {arr.size}\n")
        fh.write(" ".join(f"{v:.17g}" for v in arr) + "\n")
    else:
        fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_checkpoint(model, path):
    with open(path, "w") as fh:
        fh.write("ncm-lstm-checkpoint v1\n")
        fh.write(f"n {model.n}\n")
        fh.write(f"hidden {model.hidden}\n")
        fh.write(f"layers {model.n_layers}\n")
        fh.write(f"seed {model.seed if model.seed is not None else -1}\n")
        fh.write(f"time_input {int(model.time_input)}\n")
        _write_array(fh, "x_mean", model.x_mean)
        _write_array(fh, "x_scale", model.x_scale)
        _write_array(fh, "theta_mean", model.theta_mean)
        _write_array(fh, "theta_scale", model.theta_scale)
        for li, layer in enumerate(model.layers):
            fh.write(f"layer {li}\n")
            for name, arr in layer.params():
                _write_array(fh, name, arr)
        fh.write("output\n")
        _write_array(fh, "W_hy", model.W_hy)
        _write_array(fh, "b_y", model.b_y)
        fh.write("end\n")


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def line(self):
        ln = self.fh.readline()
        if not ln:
            raise ValueError("checkpoint truncated")
        return ln.strip()

    def keyed(self, key):
        parts = self.line().split()
        if parts[0] != key:
            raise ValueError(f"checkpoint: expected {key!r}, found {parts[0]!r}")
        return parts[1:]

    def array(self, key):
        dims = [int(v) for v in self.keyed(key)]
        if len(dims) == 1:
            return np.array([float(v) for v in self.line().split()])
        rows = [np.array([float(v) for v in self.line().split()]) for _ in range(dims[0])]
        out = np.vstack(rows)
        if out.shape != tuple(dims):
            raise ValueError(f"checkpoint: bad shape for {key}")
        return out


def load_checkpoint(path):
    with open(path) as fh:
        r = _Reader(fh)
        if r.line() != "ncm-lstm-checkpoint v1":
            raise ValueError("not a recognized checkpoint file")
        n = int(r.keyed("n")[0])
        hidden = int(r.keyed("hidden")[0])
        layers = int(r.keyed("layers")[0])
        seed = int(r.keyed("seed")[0])
        time_input = bool(int(r.keyed("time_input")[0]))
        model = DeepLstmModel(n, hidden, layers, rng=None,
                              seed=None if seed < 0 else seed,
                              time_input=time_input)
        model.x_mean = r.array("x_mean")
        model.x_scale = r.array("x_scale")
        model.theta_mean = r.array("theta_mean")
        model.theta_scale = r.array("theta_scale")
        for li, layer in enumerate(model.layers):
            if r.keyed("layer") != [str(li)]:
                raise ValueError("checkpoint: layer blocks out of order")
            for name in LAYER_PARAMS:
                setattr(layer, name, r.array(name))
        if r.line() != "output":
            raise ValueError("checkpoint: missing output block")
        model.W_hy = r.array("W_hy")
        model.b_y = r.array("b_y")
        if r.line() != "end":
            raise ValueError("checkpoint: missing end marker")
    for name, arr in model.all_params():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"checkpoint: non-finite values in {name}")
    return model
