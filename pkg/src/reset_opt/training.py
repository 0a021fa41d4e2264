"""Minibatch SGD with stochastic resetting to a validation checkpoint.

Each iteration: draw a minibatch, take an SGD step on the noisy-label loss,
then, once a checkpoint exists, jump back to it with probability ``r``.
Every ``validation_interval`` iterations the model is validated; the best
parameters are tracked and the checkpoint is armed after ``patience``
iterations without improvement, then follows every new best.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import nn
from .data import BatchSampler, LabeledDataset

logger = logging.getLogger(__name__)

VAL_LOSS = "val_loss"
VAL_ACCURACY = "val_accuracy"
METRIC_COLUMNS = ("iteration", "train_loss", "val_loss", "val_acc", "test_acc",
                  "mem_frac", "reset_event", "ckpt_updated")

# independent random streams; toggling one feature never shifts another
_STREAMS = {"batch": 1, "dropout": 2, "reset": 3, "perturb": 4, "init": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAMS[name]])


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class ResetConfig:
    """Resetting controller settings.

    ``fixed_checkpoint_iteration`` pins the checkpoint to the parameters at
    that iteration and disables arming and re-pointing. ``arm_on_improvement``
    also moves the checkpoint on improvements before it has been armed.
    """

    reset_probability: float = 0.0
    patience: int = 1000
    validation_interval: int = 20
    sections: tuple = nn.SECTIONS
    perturbation_eps: float = 0.0
    selection_metric: str = VAL_LOSS
    fixed_checkpoint_iteration: Optional[int] = None
    arm_on_improvement: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))
        if not 0.0 <= self.reset_probability <= 1.0:
            raise ValueError("reset_probability must lie in [0, 1]")
        if self.patience < 1 or self.validation_interval < 1:
            raise ValueError("patience and validation_interval must be >= 1")
        if self.reset_probability > 0 and not self.sections:
            raise ValueError("sections must be nonempty when resetting")
        if set(self.sections) - set(nn.SECTIONS):
            raise ValueError(f"sections must be a subset of {nn.SECTIONS}")
        if self.perturbation_eps < 0:
            raise ValueError("perturbation_eps must be >= 0")
        if self.selection_metric not in (VAL_LOSS, VAL_ACCURACY):
            raise ValueError(f"selection_metric must be {VAL_LOSS!r} or {VAL_ACCURACY!r}")


@dataclass
class TrainState:
    params: nn.ParamSet
    best: np.ndarray
    best_buffers: dict
    best_metric: float
    rngs: dict
    checkpoint: Optional[np.ndarray] = None
    checkpoint_buffers: Optional[dict] = None
    best_iteration: int = -1
    iters_since_best: int = 0
    iteration: int = 0
    momentum_buffer: Optional[np.ndarray] = None

    @classmethod
    def create(cls, params: nn.ParamSet, seed: int = 0,
               selection_metric: str = VAL_LOSS) -> "TrainState":
        worst = math.inf if selection_metric == VAL_LOSS else -math.inf
        rngs = {name: stream(seed, name) for name in ("dropout", "reset", "perturb")}
        return cls(params, params.flatten(), params.get_buffers(), worst, rngs)


@dataclass
class MetricsRow:
    iteration: int
    train_loss: float
    val_loss: float
    val_acc: float
    test_acc: float
    mem_frac: Optional[float]
    reset_event: bool
    ckpt_updated: bool

    def as_csv(self) -> list:
        def num(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
        return [str(self.iteration), num(self.train_loss), num(self.val_loss), num(self.val_acc),
                num(self.test_acc), num(self.mem_frac), str(int(self.reset_event)),
                str(int(self.ckpt_updated))]


def sgd_step(state: TrainState, grad: np.ndarray, lr: float, momentum: float = 0.0) -> TrainState:
    """``theta -= lr * grad``; with momentum ``buf = mu * buf + grad``, ``theta -= lr * buf``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (state.params.total_dim,):
        raise nn.DimensionError(f"gradient length {grad.shape} != {state.params.total_dim}")
    if not lr > 0 or not 0.0 <= momentum < 1.0:
        raise ValueError("need lr > 0 and 0 <= momentum < 1")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient at iteration {state.iteration}")
    if momentum > 0:
        if state.momentum_buffer is None:
            state.momentum_buffer = np.zeros_like(grad)
        state.momentum_buffer *= momentum
        state.momentum_buffer += grad
        state.params.vector -= lr * state.momentum_buffer
    else:
        state.params.vector -= lr * grad
    return state


def _improves(metric: float, best: float, kind: str) -> bool:
    if math.isnan(metric):
        return False
    return metric < best if kind == VAL_LOSS else metric > best


def _set_checkpoint(state: TrainState) -> None:
    state.checkpoint = state.best.copy()
    state.checkpoint_buffers = {k: v.copy() for k, v in state.best_buffers.items()}


def validate_and_update_checkpoint(state: TrainState, cfg: ResetConfig, val_metric: float,
                                   interval: Optional[int] = None) -> tuple:
    """Track the best parameters and arm / move the checkpoint.

    Returns ``(state, checkpoint_updated)``. Ties keep the earlier best.
    """
    interval = cfg.validation_interval if interval is None else interval
    updated = False
    if _improves(val_metric, state.best_metric, cfg.selection_metric):
        state.best = state.params.flatten()
        state.best_buffers = state.params.get_buffers()
        state.best_metric = float(val_metric)
        state.best_iteration = state.iteration
        state.iters_since_best = 0
        if cfg.fixed_checkpoint_iteration is None and (
                state.checkpoint is not None or cfg.arm_on_improvement):
            _set_checkpoint(state)
            updated = True
    else:
        state.iters_since_best += interval
        if (cfg.fixed_checkpoint_iteration is None and state.checkpoint is None
                and state.iters_since_best >= cfg.patience and state.best_iteration >= 0):
            _set_checkpoint(state)
            updated = True
    return state, updated


def maybe_reset(state: TrainState, cfg: ResetConfig) -> tuple:
    """With probability ``r`` overwrite the selected sections by the checkpoint.

    With ``perturbation_eps > 0`` the target is ``checkpoint + eps * n_hat``
    where ``n_hat`` is a fresh random unit vector over the reset coordinates.
    The momentum buffer is left as is.
    """
    if state.checkpoint is None or cfg.reset_probability <= 0:
        return state, False
    if not state.rngs["reset"].random() < cfg.reset_probability:
        return state, False
    full = set(cfg.sections) == set(nn.SECTIONS)
    mask = None if full else state.params.section_mask(cfg.sections)
    target = state.checkpoint
    if cfg.perturbation_eps > 0:
        size = state.params.total_dim if mask is None else int(mask.sum())
        direction = state.rngs["perturb"].standard_normal(size)
        direction *= cfg.perturbation_eps / np.linalg.norm(direction)
        target = target.copy()
        if mask is None:
            target += direction
        else:
            target[mask] += direction
    if mask is None:
        state.params.vector[:] = target
    else:
        state.params.vector[mask] = target[mask]
    state.params.set_buffers(state.checkpoint_buffers, cfg.sections)
    return state, True


def memorization_fraction(net: nn.NetworkSpec, params: nn.ParamSet,
                          train_ds: LabeledDataset) -> Optional[float]:
    """Share of corrupted training samples still predicted as their true class."""
    idx = np.flatnonzero(train_ds.corrupted)
    if idx.size == 0:
        return None
    pred = nn.predict(net, params, train_ds.features[idx])
    return float(np.mean(pred == train_ds.true_labels[idx]))


def relative_difference(value_at_r: float, baseline: float) -> float:
    """``(v(r) - v_base) / v_base``."""
    if baseline == 0:
        raise ValueError("baseline must be nonzero")
    return (value_at_r - baseline) / baseline


@dataclass
class TrainResult:
    best_params: nn.ParamSet
    final_params: nn.ParamSet
    metrics: list
    best_iteration: int
    best_metric: float
    n_resets: int = 0
    diverged: bool = False
    error: str = ""

    def best_row(self) -> Optional[MetricsRow]:
        for row in self.metrics:
            if row.iteration == self.best_iteration:
                return row
        return None

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.metrics], dtype=np.float64)

    def write_csv(self, path, header_comment: Optional[str] = None) -> None:
        write_metrics_csv(self.metrics, path, header_comment)


def write_metrics_csv(rows, path, header_comment: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.0
    batch_size: int = 16
    total_iters: int = 10000
    loss: str = nn.CROSS_ENTROPY
    lr_decay_step: Optional[int] = None
    lr_decay_factor: float = 0.1
    sampling: str = "replacement"

    def lr_at(self, iteration: int) -> float:
        if self.lr_decay_step:
            return self.learning_rate * self.lr_decay_factor ** (iteration // self.lr_decay_step)
        return self.learning_rate


def train(net: nn.NetworkSpec, train_ds: LabeledDataset, val_ds: LabeledDataset,
          test_ds: Optional[LabeledDataset], cfg: ResetConfig, opt: OptimizerConfig,
          seed: int = 0, params: Optional[nn.ParamSet] = None, callback=None) -> TrainResult:
    """Run SGD with stochastic resetting and return the best parameters.

    Training uses the noisy labels of ``train_ds``; validation uses the
    labels stored as ``val_ds.noisy_labels`` (pass a clean set for clean
    validation); test accuracy uses ``test_ds.true_labels``. ``callback`` is
    called as ``callback(state, row)`` after every validation.
    """
    if opt.total_iters < cfg.validation_interval:
        raise ValueError("total_iters must be at least validation_interval")
    params = nn.init_params(net, stream(seed, "init")) if params is None else params.copy()
    nn.check_params(net, params)
    state = TrainState.create(params, seed, cfg.selection_metric)
    sampler = BatchSampler(opt.batch_size, seed=int(stream(seed, "batch").integers(2 ** 63)),
                           mode=opt.sampling)
    X, y = train_ds.features, train_ds.noisy_labels
    rows, n_resets = [], 0
    window_loss, window_n, window_reset = 0.0, 0, False
    error = ""
    for t in range(1, opt.total_iters + 1):
        idx = sampler.sample(len(train_ds))
        loss, grad = nn.loss_and_grad(net, state.params, X[idx], y[idx], opt.loss, "train",
                                      state.rngs["dropout"], update_stats=True)
        try:
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at iteration {t}")
            sgd_step(state, grad, opt.lr_at(t - 1), opt.momentum)
        except NumericalError as exc:
            error = str(exc)
            logger.warning("run diverged: %s", exc)
            break
        state.iteration = t
        window_loss += loss
        window_n += 1
        state, did_reset = maybe_reset(state, cfg)
        n_resets += did_reset
        window_reset |= did_reset
        updated = False
        if cfg.fixed_checkpoint_iteration is not None and t == cfg.fixed_checkpoint_iteration:
            state.checkpoint = state.params.flatten()
            state.checkpoint_buffers = state.params.get_buffers()
            updated = True
        if t % cfg.validation_interval == 0:
            val_loss, val_acc = nn.evaluate(net, state.params, val_ds.features,
                                            val_ds.noisy_labels, opt.loss)
            metric = val_loss if cfg.selection_metric == VAL_LOSS else val_acc
            state, moved = validate_and_update_checkpoint(state, cfg, metric)
            test_acc = math.nan
            if test_ds is not None:
                test_acc = nn.evaluate(net, state.params, test_ds.features,
                                       test_ds.true_labels, opt.loss)[1]
            row = MetricsRow(t, window_loss / window_n, val_loss, val_acc, test_acc,
                             memorization_fraction(net, state.params, train_ds),
                             window_reset, updated or moved)
            rows.append(row)
            if callback is not None:
                callback(state, row)
            window_loss, window_n, window_reset = 0.0, 0, False
    best = state.params.copy()
    best.assign_(state.best)
    best.set_buffers(state.best_buffers)
    return TrainResult(best, state.params, rows, state.best_iteration, state.best_metric,
                       n_resets, bool(error), error)


def config_dict(obj) -> dict:
    """Plain-dict view of a config dataclass (tuples become lists)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


__all__ = [
    "ResetConfig", "TrainState", "MetricsRow", "TrainResult", "OptimizerConfig",
    "sgd_step", "validate_and_update_checkpoint", "maybe_reset", "memorization_fraction",
    "relative_difference", "train", "write_metrics_csv", "NumericalError", "stream",
]
