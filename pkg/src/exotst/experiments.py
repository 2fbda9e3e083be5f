"""Desk-scale experiments on the synthetic driver data.

``mechanism`` compares trained ExoTST against its future-ablated view and a
linear past-only model; ``robustness`` re-scores trained models on test
windows whose drivers are masked and/or noised.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import linear_fit_predict
from .dataset import CorruptionSpec, corrupt, make_windows, split_and_standardize, synth_generate
from .model import ExoTSTConfig, ablate_future, init_model
from .training import evaluate, train


def tiny_config(**overrides) -> ExoTSTConfig:
    base = ExoTSTConfig(lookback=16, horizon=4, patch_length=4, stride=2, d_model=8, heads=2,
                        d_ff=8, n_encoder=1, n_fusion=1, n_decoder=1, n_exogenous=2)
    return replace(base, **overrides)


@dataclass
class ExperimentData:
    splits: object
    train: list
    val: list
    test: list


def prepare(length=3000, drivers=4, data_seed=7, regime="driver-dominant", lookback=16, horizon=30):
    series = synth_generate(length, drivers, data_seed, regime=regime)
    splits = split_and_standardize(series, lookback, horizon)
    return ExperimentData(
        splits,
        make_windows(splits.train, lookback, horizon, stride=1),
        make_windows(splits.val, lookback, horizon, stride=horizon),
        make_windows(splits.test, lookback, horizon, stride=horizon),
    )


@dataclass
class MechanismRow:
    seed: int
    exotst_mse: float
    ablated_mse: float
    linear_mse: float
    best_epoch: int
    seconds: float


@dataclass
class MechanismResult:
    rows: list = field(default_factory=list)
    models: list = field(default_factory=list)

    def mean(self, column):
        return float(np.mean([getattr(r, column) for r in self.rows]))

    def ratios(self):
        ex = self.mean("exotst_mse")
        return ex / self.mean("ablated_mse"), ex / self.mean("linear_mse")


# Settings for the desk-scale runs; the default learning rate of the full-size
# model is too slow to converge in a few dozen epochs at D=8. Drivers with
# coefficients of opposite sign need per-channel patch projections to be told
# apart once they pass through the shared encoder. Some seeds sit on a plateau
# near the mean forecast for ~10 epochs before the drivers are picked up, so
# patience is 20 rather than 10.
MECHANISM_TRAINING = dict(learning_rate=3e-3, max_epochs=40, patience=20, batch_size=32,
                          channel_identity="projection")
# The linear baseline is cheap, so it is trained to convergence.
LINEAR_TRAINING = dict(learning_rate=1e-3, max_epochs=200, patience=20, batch_size=32)


def mechanism(data: ExperimentData | None = None, seeds=(0, 1, 2), verbose=False, **train_overrides):
    data = data or prepare()
    n_drivers = data.train[0].X_past.shape[0]
    horizon = len(data.train[0].y_future)
    lookback = len(data.train[0].y_past)
    settings = {**MECHANISM_TRAINING, **train_overrides}
    result = MechanismResult()
    for seed in seeds:
        cfg = tiny_config(n_exogenous=n_drivers, horizon=horizon, lookback=lookback, seed=seed, **settings)
        model = init_model(cfg)
        report = train(model, data.train, data.val, cfg)
        ex = evaluate(model, data.test)
        ab = evaluate(ablate_future(model), data.test)
        lin_cfg = replace(cfg, **LINEAR_TRAINING)
        lin, _, _ = linear_fit_predict(data.train, data.val, data.test, lin_cfg)
        row = MechanismRow(seed, ex.mse, ab.mse, lin.mse, report.best_epoch, report.seconds)
        if verbose:
            print(f"seed {seed}: exotst {ex.mse:.4f} ablated {ab.mse:.4f} linear {lin.mse:.4f} "
                  f"(best epoch {report.best_epoch}, {report.seconds:.1f}s)")
        result.rows.append(row)
        result.models.append(model)
    return result


MASK_LEVELS = (0.0, 0.4, 0.8)
SIGMA_LEVELS = (0.8, 1.2)


def robustness_grid(mask_levels=MASK_LEVELS, sigma_levels=SIGMA_LEVELS):
    """Clean row first, then every (mask, sigma) pair."""
    return [(0.0, 0.0)] + [(m, s) for m in mask_levels for s in sigma_levels]


@dataclass
class RobustnessRow:
    mask_fraction: float
    noise_sigma: float
    mse: float
    mae: float
    mse_first: float
    mae_first: float
    mse_last: float
    mae_last: float


def robustness(model, test_windows, seed=0, k=50, grid=None, past=True, future=True):
    """Score ``model`` on corrupted copies of the test windows (drivers only)."""
    rows = []
    for m, s in grid or robustness_grid():
        spec = CorruptionSpec(mask_fraction=m, noise_sigma=s, seed=seed, past=past, future=future)
        windows = corrupt(test_windows, spec) if (m or s) else test_windows
        e = evaluate(model, windows, k=k)
        rows.append(RobustnessRow(m, s, e.mse, e.mae, e.mse_first_k, e.mae_first_k,
                                  e.mse_last_k, e.mae_last_k))
    return rows


ROBUSTNESS_HEADER = ("mask_fraction", "noise_sigma", "mse", "mae",
                     "mse_first50", "mae_first50", "mse_last50", "mae_last50")


def robustness_table(rows):
    """CSV lines with the first/last-50 columns."""
    lines = [",".join(ROBUSTNESS_HEADER)]
    for r in rows:
        lines.append(",".join([f"{r.mask_fraction:g}", f"{r.noise_sigma:g}"] +
                              [f"{v:.6f}" for v in (r.mse, r.mae, r.mse_first, r.mae_first,
                                                    r.mse_last, r.mae_last)]))
    return "\n".join(lines) + "\n"
