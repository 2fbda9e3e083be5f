"""Adam training with validation early stopping, and evaluation metrics."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, DataError, NumericalError
from .model import WindowBatch, loss


@dataclass
class EarlyStopping:
    """Stop once the monitored loss has not strictly decreased for ``patience`` epochs."""

    patience: int = 10
    best: float = float("inf")
    best_epoch: int = 0
    stale: int = 0
    epoch: int = 0

    def update(self, value):
        """Record one epoch's loss; return True if it is a new best."""
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self):
        return self.stale >= self.patience


@dataclass
class EvalMetrics:
    mse: float
    mae: float
    mse_first_k: float
    mse_last_k: float
    k: int
    per_step_mse: np.ndarray
    mae_first_k: float = float("nan")
    mae_last_k: float = float("nan")

    def as_dict(self):
        return {"mse": self.mse, "mae": self.mae, "k": self.k,
                "mse_first_k": self.mse_first_k, "mse_last_k": self.mse_last_k,
                "mae_first_k": self.mae_first_k, "mae_last_k": self.mae_last_k}


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"
    seconds: float = 0.0
    test_metrics: EvalMetrics | None = None

    @property
    def best_val_loss(self):
        return min(self.val_losses) if self.val_losses else float("nan")

    def write(self, path):
        """Write ``<path>`` (key=value) and ``<path>.epochs.csv``."""
        path = Path(path)
        lines = [f"best_epoch={self.best_epoch}", f"best_val_loss={self.best_val_loss!r}",
                 f"epochs={len(self.val_losses)}", f"stop_reason={self.stop_reason}",
                 f"seconds={self.seconds:.3f}"]
        if self.test_metrics is not None:
            lines += [f"test_{k}={v!r}" for k, v in self.test_metrics.as_dict().items()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        epochs_path = path.with_name(path.name + ".epochs.csv")
        with open(epochs_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), start=1):
                w.writerow([i, repr(tr), repr(va)])
        return path, epochs_path


def _snapshot(model):
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    norms = {}
    if hasattr(model, "norms"):
        norms = {k: (n.running_mean.copy(), n.running_var.copy()) for k, n in model.norms().items()}
    return params, norms


def _restore(model, snap):
    params, norms = snap
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    if norms:
        for k, n in model.norms().items():
            n.running_mean, n.running_var = norms[k][0].copy(), norms[k][1].copy()


def _first_bad_parameter(model):
    for name, p in model.parameters().items():
        if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all()):
            return name
    return None


def predict_windows(model, windows, batch_size=256):
    """Eval-mode predictions (n, f) in the windows' units."""
    out = []
    with nx.no_grad():
        for i in range(0, len(windows), batch_size):
            y = model.predict(WindowBatch.stack(windows[i:i + batch_size]), training=False)
            out.append(y.data if isinstance(y, nx.Tensor) else np.asarray(y))
    return np.concatenate(out, axis=0)


def mean_loss(model, windows, batch_size=256):
    pred = predict_windows(model, windows, batch_size)
    target = np.stack([w.y_future for w in windows])
    return float(np.mean(np.mean((pred - target) ** 2, axis=1)))


def train(model, train_windows, val_windows, cfg, checkpoint_path=None, save_fn=None,
          verbose=False) -> TrainReport:
    """Mini-batch Adam on MSE with patience-based early stopping.

    ``cfg`` supplies ``learning_rate``, ``max_epochs``, ``patience``,
    ``batch_size`` and ``seed``. The best-validation weights are restored
    before returning, and written to ``checkpoint_path`` via ``save_fn``
    whenever a new best is reached.
    """
    if not train_windows or not val_windows:
        raise DataError("training needs at least one train and one validation window")
    params = model.parameters()
    state = nx.AdamState(learning_rate=cfg.learning_rate)
    stopper = EarlyStopping(cfg.patience)
    rng = nx.make_rng(cfg.seed)
    report = TrainReport()
    best = _snapshot(model)
    t0 = time.perf_counter()
    n = len(train_windows)
    bs = cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = WindowBatch.stack([train_windows[i] for i in idx])
            try:
                l = loss(model.predict(batch, training=True), batch.y_future)
                nx.backward(l)
            except NumericalError as exc:
                nx.get_tape().clear()
                bad = _first_bad_parameter(model)
                where = f"first non-finite parameter: {bad}" if bad else "all parameters finite"
                raise NumericalError(f"NaN/Inf during training at epoch {epoch} ({exc}); {where}") from exc
            nx.adam_step(params, state)
            total += l.item() * len(idx)
        train_loss = total / n
        val_loss = mean_loss(model, val_windows)
        if not np.isfinite(val_loss):
            bad = _first_bad_parameter(model)
            raise NumericalError(f"non-finite validation loss at epoch {epoch}; first bad parameter: {bad}")
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        if stopper.update(val_loss):
            best = _snapshot(model)
            if checkpoint_path is not None and save_fn is not None:
                save_fn(model, checkpoint_path)
        if verbose:
            print(f"epoch {epoch:3d} train {train_loss:.6f} val {val_loss:.6f}")
        if stopper.should_stop:
            report.stop_reason = "patience"
            break
    _restore(model, best)
    report.best_epoch = stopper.best_epoch
    report.seconds = time.perf_counter() - t0
    return report


def evaluate(model, windows, k=50, stats=None, destandardize=False, batch_size=256) -> EvalMetrics:
    """MSE/MAE over test windows plus first/last-k breakdowns.

    Windows are assumed to be in chronological order; the first/last ``k``
    steps are taken from their forecasts laid end to end. Metrics are in
    standardized units unless ``destandardize`` is set (needs ``stats``).
    """
    if not windows:
        raise DataError("evaluation needs a non-empty test set")
    pred = predict_windows(model, windows, batch_size)
    target = np.stack([w.y_future for w in windows])
    if destandardize:
        if stats is None:
            raise ContractError("destandardized metrics need the NormStats")
        pred, target = stats.destandardize(pred), stats.destandardize(target)
    return metrics_from_predictions(pred, target, k)


def metrics_from_predictions(pred, target, k=50) -> EvalMetrics:
    err = np.asarray(pred) - np.asarray(target)
    timeline = err.reshape(-1)
    if k > timeline.size:
        raise DataError(f"k={k} exceeds the {timeline.size} forecast steps in the test set")
    per_step = np.mean(err ** 2, axis=0)
    return EvalMetrics(
        mse=float(np.mean(per_step)),
        mae=float(np.mean(np.abs(err))),
        mse_first_k=float(np.mean(timeline[:k] ** 2)),
        mse_last_k=float(np.mean(timeline[-k:] ** 2)),
        k=k,
        per_step_mse=per_step,
        mae_first_k=float(np.mean(np.abs(timeline[:k]))),
        mae_last_k=float(np.mean(np.abs(timeline[-k:]))),
    )


def parameter_checksum(model):
    """Order-sensitive digest of all parameter and running-stat bytes."""
    import hashlib
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    if hasattr(model, "norms"):
        for name, n in model.norms().items():
            h.update(n.running_mean.tobytes())
            h.update(n.running_var.tobytes())
    return h.hexdigest()
