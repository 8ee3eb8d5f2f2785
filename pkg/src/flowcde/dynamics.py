"""Gated vector fields and the dual-path continuous-time encoder.

Two hidden states evolve on a shared unit clock: one driven by the daily
crowd-flow path, one by the monthly point-of-interest path (a scalar channel
per node-category pair).  The unit interval is split into L segments; at
each segment start a frozen estimator may emit per-category correction
weights that multiply the POI field, held constant across the segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .solvers import SolverConfig, SolverError, odeint
from .spline import SplinePath
from .tensor import Tensor, add, matmul, mul, reshape, sigmoid, sub, tanh

__all__ = [
    "GruFieldParams",
    "EncoderConfig",
    "EncoderParams",
    "EncoderState",
    "gru_field",
    "init_gru_field",
    "init_hidden",
    "init_linear",
    "init_encoder_params",
    "encode",
    "encode_plain",
]


@dataclass
class GruFieldParams:
    """Gate and candidate weights for one continuous-time gated field."""

    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")}

    def tensors(self) -> list:
        return [self.W_z, self.U_z, self.b_z, self.W_r, self.U_r, self.b_r,
                self.W_h, self.U_h, self.b_h]


def init_gru_field(rng: np.random.Generator, in_dim: int, hidden: int) -> GruFieldParams:
    def w(n_in, n_out):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)),
                      requires_grad=True)

    def b():
        return Tensor(np.zeros(hidden), requires_grad=True)

    return GruFieldParams(
        W_z=w(in_dim, hidden), U_z=w(hidden, hidden), b_z=b(),
        W_r=w(in_dim, hidden), U_r=w(hidden, hidden), b_r=b(),
        W_h=w(in_dim, hidden), U_h=w(hidden, hidden), b_h=b(),
    )


def gru_field(h: Tensor, xdot: Tensor, params: GruFieldParams) -> Tensor:
    """dh/dt = (1 - z) * (h_cand - h), gates driven by the control derivative.

    With all parameters zero this reduces to dh/dt = -h/2.
    """
    z = sigmoid(add(add(matmul(xdot, params.W_z), matmul(h, params.U_z)), params.b_z))
    r = sigmoid(add(add(matmul(xdot, params.W_r), matmul(h, params.U_r)), params.b_r))
    cand = tanh(add(add(matmul(xdot, params.W_h), matmul(mul(r, h), params.U_h)),
                    params.b_h))
    one_minus_z = sub(Tensor(np.array(1.0)), z)
    return mul(one_minus_z, sub(cand, h))


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int):
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim)),
               requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b


def init_hidden(first_observation: Tensor, init_params) -> Tensor:
    """Affine embedding of the window's first knot value into hidden space."""
    w, b = init_params
    return add(matmul(first_observation, w), b)


@dataclass
class EncoderConfig:
    """Dimensions and solver for the dual-path encoder."""

    num_nodes: int
    num_channels: int
    num_categories: int
    hidden: int
    flow_window: int       # T, in days
    poi_window: int        # M, in months
    num_obs_points: int    # L
    solver: SolverConfig = dc_field(default_factory=SolverConfig)
    rescale_correction: bool = False

    def __post_init__(self):
        if self.num_obs_points < 1:
            raise ValueError("need at least one observation point")
        if self.flow_window < 2 or self.poi_window < 2:
            raise ValueError("window lengths must be at least 2 (spline needs 2 knots)")
        if self.hidden < 1:
            raise ValueError("hidden size must be positive")


@dataclass
class EncoderParams:
    flow_field: GruFieldParams
    poi_field: GruFieldParams
    flow_init: tuple        # (C, H) weight, (H,) bias
    poi_init: tuple         # (1, H) weight, (H,) bias

    def named(self) -> dict:
        out = {}
        out.update(self.flow_field.named("flow_field"))
        out.update(self.poi_field.named("poi_field"))
        out["flow_init.w"], out["flow_init.b"] = self.flow_init
        out["poi_init.w"], out["poi_init.b"] = self.poi_init
        return out

    def tensors(self) -> list:
        return (self.flow_field.tensors() + self.poi_field.tensors()
                + list(self.flow_init) + list(self.poi_init))


def init_encoder_params(rng: np.random.Generator, config: EncoderConfig) -> EncoderParams:
    return EncoderParams(
        flow_field=init_gru_field(rng, config.num_channels, config.hidden),
        poi_field=init_gru_field(rng, 1, config.hidden),
        flow_init=init_linear(rng, config.num_channels, config.hidden),
        poi_init=init_linear(rng, 1, config.hidden),
    )


@dataclass
class EncoderState:
    """Terminal hidden states plus the correction schedule that produced them."""

    h_x: Tensor                     # (..., N, H)
    h_p: Tensor                     # (..., N, K, H)
    causal_schedule: list           # per observation point, (..., N, K) arrays
    obs_times_flow: list            # in day units, within [0, T]
    obs_times_poi: list             # in month units, within [0, M]
    nfe: int = 0


def _check_unit_span(path: SplinePath, name: str):
    if abs(path.t0) > 1e-12 or abs(path.t1 - 1.0) > 1e-12:
        raise ValueError(
            f"{name} path must be fitted on the rescaled unit interval, "
            f"got [{path.t0}, {path.t1}]"
        )


def _encode(flow_path: SplinePath, poi_path: SplinePath, params: EncoderParams,
            estimator, config: EncoderConfig) -> EncoderState:
    _check_unit_span(flow_path, "flow")
    _check_unit_span(poi_path, "poi")

    n, c, k = config.num_nodes, config.num_channels, config.num_categories
    if flow_path.channel_shape[-2:] != (n, c):
        raise ValueError(
            f"flow path channels {flow_path.channel_shape} do not end in ({n}, {c})"
        )
    if poi_path.channel_shape[-2:] != (n, k):
        raise ValueError(
            f"poi path channels {poi_path.channel_shape} do not end in ({n}, {k})"
        )
    batch_shape = flow_path.channel_shape[:-2]
    if poi_path.channel_shape[:-2] != batch_shape:
        raise ValueError("flow and poi paths disagree on batch shape")
    rows = int(np.prod(batch_shape, dtype=int)) * n if batch_shape else n

    x0 = Tensor(flow_path.eval(0.0).reshape(rows, c))
    h_x = init_hidden(x0, params.flow_init)
    p0 = Tensor(poi_path.eval(0.0).reshape(rows * k, 1))
    h_p = init_hidden(p0, params.poi_init)

    flow_tensors = params.flow_field.tensors() + list(params.flow_init)
    poi_tensors = params.poi_field.tensors() + list(params.poi_init)

    L = config.num_obs_points
    schedule = []
    nfe = 0
    for i in range(L):
        t_lo, t_hi = i / L, (i + 1) / L

        multiplier = None
        if estimator is not None:
            hx_view = h_x.data.reshape(batch_shape + (n, config.hidden))
            hp_view = h_p.data.reshape(batch_shape + (n, k, config.hidden))
            weights = estimator.weights(hx_view, hp_view)
            schedule.append(weights)
            scale = float(k) if config.rescale_correction else 1.0
            multiplier = Tensor(weights.reshape(rows * k, 1) * scale)

        def f_flow(h, t):
            xdot = Tensor(flow_path.derivative(t).reshape(rows, c))
            return gru_field(h, xdot, params.flow_field)

        def f_poi(h, t, _mult=multiplier):
            pdot = Tensor(poi_path.derivative(t).reshape(rows * k, 1))
            dh = gru_field(h, pdot, params.poi_field)
            return dh if _mult is None else mul(dh, _mult)

        try:
            traj_x = odeint(f_flow, flow_tensors, h_x, (t_lo, t_hi), [], config.solver)
            h_x = traj_x.states[-1]
            traj_p = odeint(f_poi, poi_tensors, h_p, (t_lo, t_hi), [], config.solver)
            h_p = traj_p.states[-1]
        except SolverError as e:
            raise SolverError(f"segment {i + 1}/{L}: {e}") from None
        nfe += traj_x.nfe + traj_p.nfe

    t_frac = [i / L for i in range(L)]
    return EncoderState(
        h_x=reshape(h_x, batch_shape + (n, config.hidden)),
        h_p=reshape(h_p, batch_shape + (n, k, config.hidden)),
        causal_schedule=schedule,
        obs_times_flow=[f * config.flow_window for f in t_frac],
        obs_times_poi=[f * config.poi_window for f in t_frac],
        nfe=nfe,
    )


def encode(flow_path: SplinePath, poi_path: SplinePath, params: EncoderParams,
           estimator, config: EncoderConfig) -> EncoderState:
    """Advance both paths through all L segments with dynamic correction.

    The estimator is consulted at each segment start with the current hidden
    states (as plain arrays, so no gradient reaches it) and must return
    row-stochastic weights of shape (..., N, K).
    """
    if estimator is None:
        raise ValueError("encode requires a causal estimator; "
                         "use encode_plain for the uncorrected variant")
    return _encode(flow_path, poi_path, params, estimator, config)


def encode_plain(flow_path: SplinePath, poi_path: SplinePath, params: EncoderParams,
                 config: EncoderConfig) -> EncoderState:
    """Uncorrected dual-path pass: both fields integrate without weighting."""
    return _encode(flow_path, poi_path, params, None, config)
