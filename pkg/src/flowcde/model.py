"""Fusion of the two terminal hidden states, the forecast head, and the loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    absolute,
    add,
    matmul,
    mul,
    permute,
    reshape,
    sigmoid,
    sub,
    tanh,
    tmean,
    tsum,
    where,
)

__all__ = [
    "FusionParams",
    "PredictorParams",
    "LossConfig",
    "fuse",
    "predict_head",
    "huber",
    "init_fusion",
    "init_predictor",
]


@dataclass
class FusionParams:
    W_x: Tensor
    b_x: Tensor
    W_p: Tensor
    b_p: Tensor

    def named(self) -> dict:
        return {"fusion.W_x": self.W_x, "fusion.b_x": self.b_x,
                "fusion.W_p": self.W_p, "fusion.b_p": self.b_p}

    def tensors(self) -> list:
        return [self.W_x, self.b_x, self.W_p, self.b_p]


@dataclass
class PredictorParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    steps: int          # S
    channels: int       # C

    def named(self) -> dict:
        return {"head.W1": self.W1, "head.b1": self.b1,
                "head.W2": self.W2, "head.b2": self.b2}

    def tensors(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass
class LossConfig:
    delta: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("huber delta must be positive")


def init_fusion(rng: np.random.Generator, hidden: int) -> FusionParams:
    def w():
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
                      requires_grad=True)

    def b():
        return Tensor(np.zeros(hidden), requires_grad=True)

    return FusionParams(W_x=w(), b_x=b(), W_p=w(), b_p=b())


def init_predictor(rng: np.random.Generator, hidden: int, steps: int,
                   channels: int) -> PredictorParams:
    out_dim = steps * channels
    return PredictorParams(
        W1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
                  requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        W2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out_dim)),
                  requires_grad=True),
        b2=Tensor(np.zeros(out_dim), requires_grad=True),
        steps=steps,
        channels=channels,
    )


def _flatten_rows(x: Tensor, feature_dim: int) -> Tensor:
    return reshape(x, (x.size // feature_dim, feature_dim))


def fuse(h_x: Tensor, h_p: Tensor, params: FusionParams, pool_weights=None) -> Tensor:
    """Gated fusion: sigmoid(affine(h_x)) * affine(pooled h_p).

    The POI state (..., N, K, H) is pooled over K first, by the arithmetic
    mean or, when ``pool_weights`` (..., N, K) is given, as a weighted sum
    with those constant weights.
    """
    hidden = h_x.shape[-1]
    if h_p.shape[-1] != hidden or h_p.shape[-3:-2] != h_x.shape[-2:-1]:
        raise ValueError(
            f"fusion shapes disagree: flow {h_x.shape}, poi {h_p.shape}"
        )
    if pool_weights is None:
        pooled = tmean(h_p, axis=-2)
    else:
        w = np.asarray(pool_weights, dtype=np.float64)
        if w.shape != h_p.shape[:-1]:
            raise ValueError(
                f"pool weights {w.shape} do not match poi state {h_p.shape[:-1]}"
            )
        pooled = tsum(mul(h_p, Tensor(w[..., None])), axis=-2)

    rows_x = _flatten_rows(h_x, hidden)
    rows_p = _flatten_rows(pooled, hidden)
    gate = sigmoid(add(matmul(rows_x, params.W_x), params.b_x))
    lin = add(matmul(rows_p, params.W_p), params.b_p)
    return reshape(mul(gate, lin), h_x.shape)


def predict_head(fused: Tensor, params: PredictorParams) -> Tensor:
    """Two-layer readout mapping (..., N, H) to (..., S, N, C) forecasts."""
    hidden = fused.shape[-1]
    rows = _flatten_rows(fused, hidden)
    z = tanh(add(matmul(rows, params.W1), params.b1))
    out = add(matmul(z, params.W2), params.b2)        # (rows, S*C)
    lead = fused.shape[:-1]                            # (..., N)
    out = reshape(out, lead + (params.steps, params.channels))
    axes = list(range(out.ndim))
    # move the step axis in front of the node axis: (..., N, S, C) -> (..., S, N, C)
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return permute(out, axes)


def huber(y: Tensor, yhat: Tensor, config: LossConfig) -> Tensor:
    """Mean-reduced Huber loss: quadratic inside delta, linear outside."""
    if y.shape != yhat.shape:
        raise ValueError(f"huber shapes disagree: {y.shape} vs {yhat.shape}")
    delta = config.delta
    resid = sub(y, yhat)
    mag = absolute(resid)
    quad = mul(Tensor(np.array(0.5)), mul(resid, resid))
    lin = sub(mul(Tensor(np.array(delta)), mag), Tensor(np.array(0.5 * delta * delta)))
    per_elem = where(mag.data <= delta, quad, lin)
    return tmean(per_elem)
