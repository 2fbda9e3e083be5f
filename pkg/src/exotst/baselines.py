"""Reference predictors: persistence and a one-layer linear map on past y."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataset import WindowSample
from .errors import DataError, ShapeError
from .training import EvalMetrics, TrainReport, evaluate, train


def persistence_forecast(sample: WindowSample, horizon=None):
    """Repeat the last observed target value over the horizon."""
    y = np.asarray(sample.y_past, dtype=np.float64)
    if y.size < 1:
        raise ShapeError("persistence needs at least one past value")
    f = len(sample.y_future) if horizon is None else horizon
    return np.full(f, y[-1])


class PersistenceModel:
    """Parameter-free predictor with the same ``predict`` interface as the models."""

    def __init__(self, horizon):
        self.horizon = horizon

    def parameters(self):
        return {}

    def predict(self, batch, training=False):
        return np.repeat(batch.y_past[:, -1:], self.horizon, axis=1)


@dataclass(eq=False)
class LinearBaseline:
    """``y_future ~ W @ y_past + b`` in dataset-standardized units."""

    w: nx.Tensor    # (f, L)
    b: nx.Tensor    # (f,)

    @property
    def lookback(self):
        return self.w.shape[1]

    @property
    def horizon(self):
        return self.w.shape[0]

    def parameters(self):
        return {"linear.w": self.w, "linear.b": self.b}

    def predict(self, batch, training=False):
        y = batch.y_past
        if y.ndim != 2 or y.shape[1] != self.lookback:
            raise ShapeError(f"y_past has shape {y.shape}, expected (B, {self.lookback})")
        return nx.add(nx.matmul(nx.tensor(y), nx.transpose(self.w)), self.b)


def init_linear(lookback, horizon, seed=0) -> LinearBaseline:
    rng = nx.make_rng(seed)
    w = nx.glorot_uniform(rng, (horizon, lookback), fan_in=lookback, fan_out=horizon)
    return LinearBaseline(nx.parameter(w), nx.parameter(np.zeros(horizon)))


def linear_fit_predict(train_windows, val_windows, test_windows, cfg, k=50):
    """Fit the linear baseline with the shared trainer and score it on test.

    Returns ``(metrics, model, report)``.
    """
    if not train_windows or not val_windows or not test_windows:
        raise DataError("linear baseline needs non-empty train, val and test windows")
    s = train_windows[0]
    model = init_linear(len(s.y_past), len(s.y_future), cfg.seed)
    report: TrainReport = train(model, train_windows, val_windows, cfg)
    metrics: EvalMetrics = evaluate(model, test_windows, k=min(k, len(test_windows) * model.horizon))
    report.test_metrics = metrics
    return metrics, model, report
