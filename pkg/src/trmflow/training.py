"""Minibatch Adam training with early stopping and resumable checkpoints."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics, neural
from .errors import ConfigError, DivergenceError
from .io_utils import write_table
from .pipeline import PipelineConfig, PipelineParams, batch_arrays, forward, loss_and_grad, window_loss_terms

HISTORY_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_rmse", "valid_mape")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    max_seconds: float | None = None  # wall-clock cap; makes runs timing dependent

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("need lr >= 0, batch_size >= 1, epochs >= 0, patience >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam decay rates must lie in [0, 1) and eps must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(theta, grad, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    """One bias-corrected Adam step; updates ``state`` in place, returns new theta."""
    state.t += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = state.m / (1 - cfg.beta1**state.t)
    v_hat = state.v / (1 - cfg.beta2**state.t)
    return theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class TrainState:
    theta: np.ndarray
    adam: AdamState
    epoch: int = 0  # epochs completed
    best_theta: np.ndarray | None = None
    best_rmse: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list[dict] = field(default_factory=list)
    stopped: str = ""


def predict_batched(params: PipelineParams, pasts: np.ndarray, config: PipelineConfig, batch: int = 256):
    """Forward pass over many windows; returns ``(smoothed, predicted, rates)`` stacks."""
    out_s, out_p, out_r = [], [], []
    for i in range(0, len(pasts), batch):
        out = forward(params, pasts[i : i + batch], config)
        out_s.append(np.asarray(out.smoothed))
        out_p.append(np.asarray(out.predicted))
        out_r.append(np.asarray(out.rates))
    return np.concatenate(out_s), np.concatenate(out_p), np.concatenate(out_r)


def validation_metrics(params, examples, config: PipelineConfig, batch: int = 256) -> dict:
    """Loss plus RMSE/MAPE of the forecast rows at observed interfaces."""
    past, target = batch_arrays(examples)
    obs = config.geometry.observed_indices
    predicted, total = [], 0.0
    for i in range(0, len(past), batch):
        out = forward(params, past[i : i + batch], config)
        rows = np.concatenate([out.smoothed, out.predicted], axis=1)
        rates = list(out.rates.transpose(1, 0, 2))
        terms = window_loss_terms(list(rows.transpose(1, 0, 2)), target[i : i + batch], rates, config.n_past, obs)
        value = terms["past"] + terms["future"] + config.reg_weight * terms["reg"]
        total += float(value) * len(rows)
        predicted.append(out.predicted)
    predicted = np.concatenate(predicted)
    truth = target[:, config.n_past :]
    return {
        "valid_loss": total / len(past),
        "valid_rmse": metrics.rmse(predicted[:, :, obs], truth),
        "valid_mape": metrics.mape(predicted[:, :, obs], truth),
    }


def _check_finite(value, grad, epoch, batch):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch + 1}, batch {batch}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise DivergenceError(f"{bad} non-finite gradient entries at epoch {epoch + 1}, batch {batch}")


def train(
    params: PipelineParams,
    train_examples,
    valid_examples,
    config: PipelineConfig,
    cfg: TrainConfig,
    checkpoint=None,
    state: TrainState | None = None,
    log=None,
) -> tuple[PipelineParams, TrainState]:
    """Fit ``params``; returns the best parameters (by validation RMSE) and the final state.

    Each epoch shuffles with a generator keyed on ``(seed, epoch)``, so a run
    resumed from a checkpoint follows the same trajectory as an uninterrupted one.

    Args:
        checkpoint: path rewritten after every epoch, or None.
        state: resume from this state (see :func:`load_checkpoint`).
        log: optional callable receiving each history row.
    """
    if len(train_examples) == 0:
        raise ConfigError("no training windows")
    past, target = batch_arrays(train_examples)
    n = len(past)
    if state is None:
        theta = params.flatten()
        state = TrainState(theta, AdamState.zeros(theta.size), best_theta=theta.copy())
    started = time.monotonic()

    def out_of_time():
        return cfg.max_seconds is not None and time.monotonic() - started > cfg.max_seconds

    while state.epoch < cfg.epochs and not state.stopped:
        epoch = state.epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        # work on copies so a time stop mid-epoch leaves the state at the epoch boundary
        theta, loss_sum = state.theta, 0.0
        adam = AdamState(state.adam.m.copy(), state.adam.v.copy(), state.adam.t)
        for b, i in enumerate(range(0, n, cfg.batch_size)):
            if out_of_time():
                state.stopped = "time"
                break
            idx = order[i : i + cfg.batch_size]
            value, grad = loss_and_grad(params.unflatten(theta), (past[idx], target[idx]), config)
            _check_finite(value, grad, epoch, b)
            loss_sum += value * len(idx)
            theta = adam_update(theta, grad, adam, cfg)
        if state.stopped:
            break
        state.theta, state.adam = theta, adam
        state.epoch = epoch + 1
        row = {"epoch": state.epoch, "train_loss": loss_sum / n}
        if valid_examples:
            row.update(validation_metrics(params.unflatten(theta), valid_examples, config))
            if not math.isfinite(row["valid_loss"]):
                raise DivergenceError(f"non-finite validation loss at epoch {state.epoch}")
            if row["valid_rmse"] < state.best_rmse:
                state.best_rmse, state.best_epoch, state.bad_epochs = row["valid_rmse"], state.epoch, 0
                state.best_theta = theta.copy()
            else:
                state.bad_epochs += 1
                if state.bad_epochs >= cfg.patience:
                    state.stopped = "patience"
        else:
            state.best_theta, state.best_epoch = theta.copy(), state.epoch
        state.history.append(row)
        if log is not None:
            log(row)
        if checkpoint is not None:
            save_checkpoint(checkpoint, params.unflatten(theta), state, cfg)
    if not state.stopped:
        state.stopped = "epochs"
    return params.unflatten(state.best_theta), state


def save_checkpoint(path, params: PipelineParams, state: TrainState, cfg: TrainConfig, meta=None) -> None:
    """Parameters, Adam moments, best parameters and loop counters in one file."""
    info = {
        "epoch": state.epoch,
        "t": state.adam.t,
        "best_rmse": state.best_rmse if math.isfinite(state.best_rmse) else None,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "stopped": state.stopped,
        "history": state.history,
        "train_config": asdict(cfg),
    }
    info.update(meta or {})
    extra = {"adam_m": state.adam.m, "adam_v": state.adam.v, "best_theta": state.best_theta}
    extra.update(_norm_arrays(params))
    neural.save_blocks(path, params.blocks(), seed=cfg.seed, extra_arrays=extra, meta=info)


def load_checkpoint(path, config: PipelineConfig) -> tuple[PipelineParams, TrainState, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, state, meta)``."""
    blocks, _, extra, meta = neural.load_blocks(path)
    params = PipelineParams(**{name: blocks[name] for name in PipelineParams.BLOCKS})
    params = replace(params, input_shift=extra.get("input_shift"), input_scale=extra.get("input_scale"))
    if params.counts() != PipelineParams.zeros(config).counts():
        raise ConfigError("checkpoint shapes do not match the pipeline configuration")
    best = meta["best_rmse"]
    state = TrainState(
        theta=params.flatten(),
        adam=AdamState(extra["adam_m"], extra["adam_v"], int(meta["t"])),
        epoch=int(meta["epoch"]),
        best_theta=extra["best_theta"],
        best_rmse=math.inf if best is None else float(best),
        best_epoch=int(meta["best_epoch"]),
        bad_epochs=int(meta["bad_epochs"]),
        history=list(meta["history"]),
        stopped="",
    )
    return params, state, meta


def _norm_arrays(params: PipelineParams) -> dict:
    out = {}
    if params.input_shift is not None:
        out["input_shift"] = params.input_shift
    if params.input_scale is not None:
        out["input_scale"] = params.input_scale
    return out


def save_params(path, params: PipelineParams, seed=None, meta=None) -> None:
    """Parameters only (no optimizer state)."""
    neural.save_blocks(path, params.blocks(), seed=seed, extra_arrays=_norm_arrays(params), meta=meta)


def load_params(path, config: PipelineConfig) -> PipelineParams:
    """Parameters from a checkpoint or a :func:`save_params` file."""
    blocks, _, extra, _ = neural.load_blocks(path)
    params = PipelineParams(**{name: blocks[name] for name in PipelineParams.BLOCKS})
    if params.counts() != PipelineParams.zeros(config).counts():
        raise ConfigError("stored parameter shapes do not match the pipeline configuration")
    return replace(params, input_shift=extra.get("input_shift"), input_scale=extra.get("input_scale"))


def write_history(path, history: list[dict]) -> None:
    write_table(path, HISTORY_COLUMNS, [[row.get(c) for c in HISTORY_COLUMNS] for row in history])
