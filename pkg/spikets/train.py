"""Backpropagation-through-time training with Adam and early stopping."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import xarray as xr

from spikets.autodiff import DiffArray, Tape, backward, square
from spikets.errors import ConfigError, EmptySplitError, NonFiniteError, ShapeError, TrainingDivergedError
from spikets.layers import Module
from spikets.utils import nano_to_sec

logger = logging.getLogger(__name__)

LOSSES = ("mse",)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings.

    Args:
        batch_size (int): Windows per step, >= 2 because of batch normalization.
        lr (float): Adam learning rate, > 0.
        patience (int): Epochs without validation improvement tolerated before stopping.
        max_epochs (int): Upper bound on epochs; early stopping normally ends training first.
        seed (int): Seed of the batch order.
        loss (str): Training loss, "mse".
        clip_norm (float): Optional global gradient-norm clip.
    """

    batch_size: int = 128
    lr: float = 1e-4
    patience: int = 30
    max_epochs: int = 200
    seed: int = 0
    loss: str = "mse"
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (batch normalization), got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.loss not in LOSSES:
            raise ConfigError(f"Unknown loss '{self.loss}', expected one of {LOSSES}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


def mse_loss(pred: DiffArray, target) -> DiffArray:
    """Mean of the squared elementwise error."""
    target = target if isinstance(target, DiffArray) else DiffArray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ in shape")
    return square(pred - target).mean()


@dataclass
class AdamState:
    """First and second moments per parameter name and the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Apply one bias-corrected Adam update in place.

    Args:
        params (dict): Name to DiffArray.
        grads (dict): Name to gradient array; missing or None entries count as zero.
        state (AdamState): Moments, updated in place.
        lr (float): Learning rate.
    """
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.values) if grad is None else np.asarray(grad)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient of '{name}' has shape {grad.shape}, parameter has {param.shape}")
        m = state.m.get(name, np.zeros_like(param.values))
        v = state.v.get(name, np.zeros_like(param.values))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.values -= update.astype(param.values.dtype)


class Adam:
    """Adam over the named parameters of a module."""

    def __init__(self, model: Module, lr: float, clip_norm: Optional[float] = None):
        self.params = dict(model.named_parameters())
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = AdamState()

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        if self.clip_norm is not None:
            clip_grad_norm(grads, self.clip_norm)
        adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most `max_norm`. Returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return total


def predict(model: Module, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Forecasts for windows x (M, T, C) in evaluation mode, fixed order."""
    was_training = model.training
    model.eval()
    try:
        outputs = [model(x[i : i + batch_size]).values for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(outputs, axis=0)


def evaluate_loss(model: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 128) -> float:
    """Mean squared error over all windows (fixed order, evaluation mode)."""
    preds = predict(model, x, batch_size)
    return float(np.mean((preds.astype(np.float64) - y) ** 2))


@dataclass
class TrainResult:
    model: Module
    history: xr.Dataset
    best_epoch: int
    best_valid_loss: float


def train(model: Module, train_windows: tuple, valid_windows: tuple, cfg: TrainConfig) -> TrainResult:
    """Minimise the training loss with Adam, keeping the parameters with the lowest validation loss.

    Training batches are shuffled with `np.random.default_rng(cfg.seed)`; the last partial batch is dropped.
    Validation runs after every epoch. Training stops once the validation loss has failed to improve for more than
    `cfg.patience` consecutive epochs, or after `cfg.max_epochs`.

    Args:
        model (Module): Model to train, updated in place.
        train_windows (tuple): (X, Y) arrays of the train part.
        valid_windows (tuple): (X, Y) arrays of the valid part.
        cfg (TrainConfig): Settings.

    Returns:
        TrainResult: The model (holding the best parameters), per-epoch history, and the best epoch.

    Raises:
        EmptySplitError: If there is not a single full training batch or no validation window.
        TrainingDivergedError: If the loss becomes non-finite.
    """
    x_train, y_train = train_windows
    x_valid, y_valid = valid_windows
    n_batches = len(x_train) // cfg.batch_size
    if n_batches == 0:
        raise EmptySplitError(f"{len(x_train)} training windows do not fill one batch of {cfg.batch_size}")
    if len(x_valid) == 0:
        raise EmptySplitError("No validation windows")

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model, cfg.lr, cfg.clip_norm)
    best_state, best_loss, best_epoch, bad_epochs = model.state_dict(), float("inf"), -1, 0
    epochs, train_losses, valid_losses, walls = [], [], [], []

    for epoch in range(cfg.max_epochs):
        start = time.perf_counter_ns()
        model.train()
        order = rng.permutation(len(x_train))
        batch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            try:
                with Tape():
                    loss = mse_loss(model(x_train[idx]), y_train[idx])
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                backward(loss)
            except NonFiniteError as err:
                raise TrainingDivergedError(f"Training diverged at epoch {epoch}, batch {b}: {err}") from err
            optimizer.step()
            optimizer.zero_grad()
            batch_losses.append(loss.item())

        valid_loss = evaluate_loss(model, x_valid, y_valid, cfg.batch_size)
        if not np.isfinite(valid_loss):
            raise TrainingDivergedError(f"Validation loss is not finite at epoch {epoch}")
        epochs.append(epoch)
        train_losses.append(float(np.mean(batch_losses)))
        valid_losses.append(valid_loss)
        walls.append(nano_to_sec(time.perf_counter_ns() - start))
        logger.info("epoch %d: train %.6f, valid %.6f", epoch, train_losses[-1], valid_loss)

        if valid_loss < best_loss:
            best_state, best_loss, best_epoch, bad_epochs = model.state_dict(), valid_loss, epoch, 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                logger.info("Early stop at epoch %d, best epoch %d", epoch, best_epoch)
                break

    model.load_state_dict(best_state)
    history = xr.Dataset(
        data_vars=dict(
            train_loss=(["epoch"], train_losses),
            valid_loss=(["epoch"], valid_losses),
            wall_seconds=(["epoch"], walls),
        ),
        coords=dict(epoch=epochs),
    )
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_valid_loss=best_loss)


def write_history(history: xr.Dataset, path: Path):
    """Write the per-epoch history as CSV (epoch, train_loss, valid_loss, wall_seconds)."""
    history.to_dataframe().reset_index().to_csv(path, index=False)
