"""Model assembly, the training loop, and split evaluation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field

import numpy as np

from .causal import CausalEstimator
from .data import DatasetBundle, denormalize, normalize, window
from .dynamics import (EncoderConfig, EncoderParams, encode, encode_plain,
                       init_encoder_params)
from .metrics import MetricReport, horizon_report
from .model import (FusionParams, LossConfig, PredictorParams, fuse, huber,
                    init_fusion, init_predictor, predict_head)
from .optim import Adam, save_checkpoint
from .spline import fit_natural_cubic
from .tensor import Tensor, backward, no_grad

__all__ = [
    "SEED_INIT",
    "SEED_SHUFFLE",
    "SEED_PERTURB",
    "sub_seed",
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "init_model",
    "params_from_arrays",
    "forward_batch",
    "train",
    "evaluate",
]

# Distinct sub-streams drawn from one user-facing seed.  The synthetic-data
# and surrogate-init domains (4 and 5) live in data.py and causal.py.
SEED_INIT = 0
SEED_SHUFFLE = 1
SEED_PERTURB = 2


def sub_seed(seed: int, domain: int) -> int:
    """Stable integer sub-seed for one domain of a user-facing seed."""
    return int(np.random.SeedSequence([seed, domain]).generate_state(1)[0])


@dataclass
class ModelParams:
    encoder: EncoderParams
    fusion: FusionParams
    head: PredictorParams

    def named(self) -> dict:
        out = {}
        out.update(self.encoder.named())
        out.update(self.fusion.named())
        out.update(self.head.named())
        return out

    def tensors(self) -> list:
        return self.encoder.tensors() + self.fusion.tensors() + self.head.tensors()


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    horizon: int = 14
    pool: str = "mean"            # "mean" or "weighted" (uses the final correction weights)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.pool not in ("mean", "weighted"):
            raise ValueError(f"unknown pool mode '{self.pool}'")


@dataclass
class TrainResult:
    params: ModelParams
    history: list                 # per epoch: {"epoch", "train_loss", "val_mae"}
    best_epoch: int
    best_val_mae: float
    epochs_run: int


def init_model(rng: np.random.Generator, enc_config: EncoderConfig,
               horizon: int) -> ModelParams:
    return ModelParams(
        encoder=init_encoder_params(rng, enc_config),
        fusion=init_fusion(rng, enc_config.hidden),
        head=init_predictor(rng, enc_config.hidden, horizon,
                            enc_config.num_channels),
    )


def params_from_arrays(arrays: dict, enc_config: EncoderConfig,
                       horizon: int) -> ModelParams:
    """Rebuild model parameters from a checkpoint's name -> array mapping."""
    params = init_model(np.random.default_rng(0), enc_config, horizon)
    named = params.named()
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ValueError(
            f"checkpoint parameters disagree: missing {missing}, unexpected {extra}"
        )
    for name, tensor in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.shape:
            raise ValueError(
                f"parameter '{name}' has shape {arr.shape}, expected {tensor.shape}"
            )
        tensor.data = arr.copy()
    return params


def _stacked_paths(samples, enc_config: EncoderConfig):
    t_flow = np.linspace(0.0, 1.0, enc_config.flow_window)
    t_poi = np.linspace(0.0, 1.0, enc_config.poi_window)
    flow = np.stack([s.flow_window for s in samples], axis=1)   # (T, B, N, C)
    poi = np.stack([s.poi_window for s in samples], axis=1)     # (M, B, N, K)
    return fit_natural_cubic(t_flow, flow), fit_natural_cubic(t_poi, poi)


def forward_batch(samples, params: ModelParams, enc_config: EncoderConfig,
                  estimator: CausalEstimator | None = None, pool: str = "mean"):
    """Normalized forecasts (B, S, N, C) for a batch of window samples."""
    try:
        flow_path, poi_path = _stacked_paths(samples, enc_config)
        if estimator is not None:
            state = encode(flow_path, poi_path, params.encoder, estimator, enc_config)
        else:
            state = encode_plain(flow_path, poi_path, params.encoder, enc_config)
        weights = None
        if pool == "weighted":
            if not state.causal_schedule:
                raise ValueError("weighted pooling requires the causal estimator")
            weights = state.causal_schedule[-1]
        fused = fuse(state.h_x, state.h_p, params.fusion, pool_weights=weights)
        return predict_head(fused, params.head), state
    except Exception as exc:
        anchors = [s.anchor_day for s in samples]
        raise RuntimeError(f"batch anchored at days {anchors}: {exc}") from exc


def _split_mae(samples, params, enc_config, estimator, pool, stats,
               chunk: int = 16) -> float:
    """Mean absolute error over a split, in original units."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(samples), chunk):
            batch = samples[start:start + chunk]
            pred, _ = forward_batch(batch, params, enc_config, estimator, pool)
            actual = denormalize(np.stack([s.target for s in batch]), stats)
            forecast = denormalize(pred.data, stats)
            total += float(np.abs(actual - forecast).sum())
            count += actual.size
    return total / count


def train(bundle: DatasetBundle, enc_config: EncoderConfig,
          config: TrainConfig, estimator: CausalEstimator | None = None,
          checkpoint_path=None, log=None) -> TrainResult:
    """Fit the forecaster with Adam, early-stopping on validation MAE.

    The loss runs in normalized units; validation MAE is reported in
    original units.  The best-validation parameters are restored (and
    optionally checkpointed) before return.
    """
    norm = normalize(bundle)
    stats = norm.norm_stats
    t, m, s = enc_config.flow_window, enc_config.poi_window, config.horizon
    train_samples = window(norm, t, m, s, "train")
    val_samples = window(norm, t, m, s, "val")
    if not train_samples or not val_samples:
        raise ValueError("train or val split produced no windows")

    rng_init = np.random.default_rng(
        np.random.SeedSequence([config.seed, SEED_INIT]))
    rng_shuffle = np.random.default_rng(
        np.random.SeedSequence([config.seed, SEED_SHUFFLE]))
    params = init_model(rng_init, enc_config, s)
    opt = Adam(params.tensors(), lr=config.learning_rate,
               weight_decay=config.weight_decay)

    history = []
    best_val = np.inf
    best_epoch = -1
    best_arrays = None
    epochs_run = 0
    for epoch in range(config.max_epochs):
        order = rng_shuffle.permutation(len(train_samples))
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            pred, _ = forward_batch(batch, params, enc_config, estimator, config.pool)
            target = Tensor(np.stack([b.target for b in batch]))
            loss = huber(target, pred, config.loss)
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += float(loss.data)
            batches += 1

        val_mae = _split_mae(val_samples, params, enc_config, estimator,
                             config.pool, stats)
        history.append({"epoch": epoch, "train_loss": epoch_loss / batches,
                        "val_mae": val_mae})
        epochs_run = epoch + 1
        if log is not None:
            log(f"epoch {epoch}: train_loss {epoch_loss / batches:.6f} "
                f"val_mae {val_mae:.6f}")
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_arrays = {n: t.data.copy() for n, t in params.named().items()}
        elif epoch - best_epoch >= config.patience:
            break

    for name, tensor in params.named().items():
        tensor.data = best_arrays[name]
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params.named(),
                        hyperparameters={
                            "learning_rate": config.learning_rate,
                            "weight_decay": config.weight_decay,
                            "batch_size": config.batch_size,
                            "horizon": config.horizon,
                            "pool": config.pool,
                            "huber_delta": config.loss.delta,
                            "seed": config.seed,
                            "best_epoch": best_epoch,
                        })
    return TrainResult(params=params, history=history, best_epoch=best_epoch,
                       best_val_mae=best_val, epochs_run=epochs_run)


def evaluate(bundle: DatasetBundle, params: ModelParams,
             enc_config: EncoderConfig, estimator: CausalEstimator | None = None,
             split: str = "test", pool: str = "mean", horizon: int | None = None,
             model_id: str = "model", chunk: int = 16):
    """Forecast one split and score it in original units.

    Returns (samples, forecasts, report) where forecasts is a list of
    (S, N, C) arrays aligned with the window samples.
    """
    norm = normalize(bundle)
    stats = norm.norm_stats
    s = horizon if horizon is not None else params.head.steps
    samples = window(norm, enc_config.flow_window, enc_config.poi_window, s, split)
    if not samples:
        raise ValueError(f"split '{split}' produced no windows")
    forecasts = []
    with no_grad():
        for start in range(0, len(samples), chunk):
            batch = samples[start:start + chunk]
            pred, _ = forward_batch(batch, params, enc_config, estimator, pool)
            forecasts.extend(denormalize(pred.data, stats))
    actuals = [denormalize(s.target, stats) for s in samples]
    report = horizon_report(actuals, forecasts, model=model_id,
                            dataset=bundle.name)
    return samples, forecasts, report
