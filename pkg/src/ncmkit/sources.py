"""Online metric sources for the estimator and controller loops.

A source produces the contraction metric M(x, t) used to form gains at
runtime.  Three interchangeable providers:

  * SampledMetricSource: nearest-neighbor lookup into the metrics solved
    offline along sampled trajectories ("cvstem-samples").
  * NcmMetricSource: a trained LSTM evaluated on the streaming state
    estimate ("ncm").  Stateful; reset() clears the recurrent state
    between runs.
  * ConstantMetricSource: a fixed matrix, mostly for tests ("constant").

All sources guarantee a symmetric positive definite return.
"""

from __future__ import annotations

import numpy as np

from .lstm import LstmStream, predict_metric
from .metric import is_positive_definite


class SampledMetricSource:
    """Nearest-neighbor metric lookup over offline-solved samples.

    Queries return the stored metric of the sample whose state is closest
    in Euclidean norm to the query state.  This is the runtime face of
    the sampled-metric pipeline: the optimization runs offline and the
    stored field is interpolated (zeroth order) online.
    """

    tag = "cvstem-samples"

    def __init__(self, samples):
        if not samples:
            raise ValueError("need at least one metric sample")
        self.states = np.array([s.x for s in samples], dtype=float)
        self.metrics = np.array([s.M for s in samples], dtype=float)
        n = self.states.shape[1]
        if self.metrics.shape[1:] != (n, n):
            raise ValueError("sample metric dimension does not match states")
        for i, M in enumerate(self.metrics):
            if not is_positive_definite(M):
                raise ValueError(f"sample {i} metric is not positive definite")

    def reset(self):
        pass

    def metric(self, x, t=0.0):
        d2 = np.sum((self.states - np.asarray(x, dtype=float)) ** 2, axis=1)
        return self.metrics[int(np.argmin(d2))]


class NcmMetricSource:
    """Streaming LSTM metric prediction along the estimate trajectory."""

    tag = "ncm"

    def __init__(self, model):
        self.model = model
        self.stream = model.make_stream()

    def reset(self):
        self.stream.reset()

    def metric(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        if self.model.time_input:
            x = np.append(x, t)
        return predict_metric(self.stream, x)


class ConstantMetricSource:
    tag = "constant"

    def __init__(self, M):
        M = np.asarray(M, dtype=float)
        if not is_positive_definite(M):
            raise ValueError("constant metric must be positive definite")
        self.M = M

    def reset(self):
        pass

    def metric(self, x, t=0.0):
        return self.M
