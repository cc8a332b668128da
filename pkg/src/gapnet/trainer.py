"""Mini-batch Adam training with early stopping on validation AUC."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ConfigError
from .data import Batch, Instance, make_batch
from .metrics import UndefinedMetricError, auc_global
from .model import AblationConfig, GapNetParams, ModelConfig, check_vocab, forward, loss_and_grads

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 10
    patience: int = 3
    clip_norm: Optional[float] = 5.0
    prior_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and patience >= 1 are required")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: dict, grads: dict, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    ``params`` maps path -> Tensor and ``grads`` maps path -> array; paths
    without a gradient are left untouched (their moments do not advance).
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not match parameter {path} {p.shape}")
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for path in grads:
            grads[path] = grads[path] * factor
    return norm


@dataclass
class TrainResult:
    params: GapNetParams
    history: list
    best_epoch: Optional[int]
    best_val_auc: Optional[float]


def validation_auc(params: GapNetParams, ablation: AblationConfig, batch: Batch, chunk: int = 2048) -> float:
    probs = np.concatenate(
        [forward(params, ablation, batch.take(np.arange(i, min(i + chunk, len(batch))))).probs for i in range(0, len(batch), chunk)]
    )
    try:
        return auc_global(probs, batch.labels)
    except UndefinedMetricError:
        return math.nan


def train(
    model_cfg: ModelConfig,
    ablation: AblationConfig,
    train_data: list[Instance],
    val_data: Optional[list[Instance]],
    cfg: TrainConfig,
    params: Optional[GapNetParams] = None,
) -> TrainResult:
    """Fit a model; returns the parameters of the best validation epoch.

    Parameters are initialized from ``cfg.seed`` unless ``params`` is given;
    fresh parameters get an output bias at the log-odds of the training
    click rate (``prior_bias``).
    Every epoch visits the training set in a fresh seeded order. Training stops
    once ``patience`` epochs pass without a better validation AUC.
    """
    if not train_data:
        raise ValueError("train: training data is empty")
    fresh = params is None
    params = params or GapNetParams(model_cfg, ablation, seed=cfg.seed)
    check_vocab(params, train_data)
    if val_data:
        check_vocab(params, val_data)
    full = make_batch(train_data)
    if fresh and cfg.prior_bias:
        params.set_output_prior(full.labels.mean())
    val = make_batch(val_data) if val_data else None
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    history = []
    best = (None, -math.inf, params.snapshot())
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(full))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = full.take(order[start : start + cfg.batch_size])
            loss = loss_and_grads(params, ablation, batch)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            named = dict(params.named_parameters())
            grads = {p: t.grad for p, t in named.items() if t.grad is not None}
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(state, named, grads, cfg)
            for path in grads:
                if not np.isfinite(named[path].data).all():
                    raise FloatingPointError(f"parameter {path} became non-finite at epoch {epoch}")
            total += loss * len(batch)
            seen += len(batch)

        val_auc = validation_auc(params, ablation, val) if val is not None else math.nan
        history.append({"epoch": epoch, "train_loss": total / seen, "val_auc": val_auc})
        logger.info("epoch %d train_loss %.5f val_auc %.5f", epoch, total / seen, val_auc)
        if val is None or math.isnan(val_auc):
            best = (epoch, val_auc, params.snapshot())
            continue
        if val_auc > best[1]:
            best = (epoch, val_auc, params.snapshot())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    best_epoch, best_auc, snap = best
    params.load_snapshot(snap)
    return TrainResult(params, history, best_epoch, None if best_epoch is None else best_auc)
