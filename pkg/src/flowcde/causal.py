"""Counterfactual perturbations, the frozen surrogate, and effect weights.

At an observation point the surrogate predicts a next-day activity total per
node from the current hidden states.  Each POI category is perturbed in
turn; the per-node absolute difference between the factual (anchor) output
and the counterfactual output scores that category's influence, and a
per-node softmax over categories turns the scores into correction weights.
Everything here runs outside the training tape: weights act as constants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from .model import LossConfig, huber
from .optim import Adam
from .tensor import Tensor, add, matmul, mul, no_grad, permute, reshape, tanh

__all__ = [
    "PerturbationStrategy",
    "SurrogatePredictor",
    "CausalEstimator",
    "CausalEffectReport",
    "normalize_adjacency",
    "perturb",
    "causal_effect",
    "causal_weights",
    "estimate",
    "pretrain_surrogate",
    "report_csv",
    "report_summary",
]

STRATEGY_KINDS = ("zero", "random", "mean")


@dataclass
class PerturbationStrategy:
    kind: str = "zero"
    random_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy '{self.kind}', expected {STRATEGY_KINDS}")
        if self.random_scale <= 0:
            raise ValueError("random_scale must be positive")
        if self.seed < 0:
            raise ValueError("strategy seed must be non-negative")


def perturb(h_p: np.ndarray, k: int, strategy: PerturbationStrategy) -> np.ndarray:
    """Replace category slice k of (..., N, K, H) per the strategy.

    zero blanks the slice; mean replaces it with the average of the other
    K-1 slices; random replaces it with a seeded Gaussian draw whose scale
    follows the empirical spread of the whole state.  The input is never
    modified.
    """
    h_p = np.asarray(h_p)
    num_cat = h_p.shape[-2]
    if not 0 <= k < num_cat:
        raise ValueError(f"category index {k} out of range for K={num_cat}")
    out = h_p.copy()
    if strategy.kind == "zero":
        out[..., k, :] = 0.0
    elif strategy.kind == "mean":
        if num_cat < 2:
            raise ValueError("mean strategy needs at least two categories")
        others = (h_p.sum(axis=-2) - h_p[..., k, :]) / (num_cat - 1)
        out[..., k, :] = others
    else:
        rng = np.random.default_rng(np.random.SeedSequence([strategy.seed, k]))
        std = strategy.random_scale * float(h_p.std())
        out[..., k, :] = rng.normal(0.0, std, size=h_p[..., k, :].shape)
    return out


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized mixing matrix with self-loops added first."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n):
        raise ValueError(f"adjacency must be square, got {adjacency.shape}")
    with_loops = adjacency + np.eye(n)
    return with_loops / with_loops.sum(axis=1, keepdims=True)


class SurrogatePredictor:
    """Graph-aware next-day activity predictor over hidden states.

    One row-normalized adjacency mixing step over linearly pooled node
    features, then a two-layer perceptron to one scalar per node.  Frozen
    after pretraining; the main model must never update it.
    """

    def __init__(self, adjacency_norm: np.ndarray, hidden: int, num_categories: int,
                 width: int, rng: np.random.Generator | None = None,
                 params: dict | None = None):
        self.adjacency_norm = np.asarray(adjacency_norm, dtype=np.float64)
        self.num_nodes = self.adjacency_norm.shape[0]
        self.hidden = hidden
        self.num_categories = num_categories
        self.width = width
        self.frozen = False
        if params is not None:
            self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        else:
            if rng is None:
                raise ValueError("need an rng or explicit params")

            def w(n_in, n_out):
                return Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)),
                              requires_grad=True)

            self.params = {
                "pool_flow": w(hidden, width),
                "pool_poi": w(num_categories * hidden, width),
                "pool_b": Tensor(np.zeros(width), requires_grad=True),
                "mlp_w1": w(width, width),
                "mlp_b1": Tensor(np.zeros(width), requires_grad=True),
                "mlp_w2": w(width, 1),
                "mlp_b2": Tensor(np.zeros(1), requires_grad=True),
            }
        self._adj_t = Tensor(self.adjacency_norm)

    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def state_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()

    def predict(self, h_x, h_p) -> Tensor:
        """Score each node: inputs (..., N, H) and (..., N, K, H) -> (..., N)."""
        hx = h_x if isinstance(h_x, Tensor) else Tensor(np.asarray(h_x))
        hp = h_p if isinstance(h_p, Tensor) else Tensor(np.asarray(h_p))
        n, h, k = self.num_nodes, self.hidden, self.num_categories
        if hx.shape[-2:] != (n, h) or hp.shape[-3:] != (n, k, h):
            raise ValueError(
                f"surrogate expects (..., {n}, {h}) and (..., {n}, {k}, {h}), "
                f"got {hx.shape} and {hp.shape}"
            )
        lead = hx.shape[:-2]
        rows = hx.size // h
        p = self.params
        feats = add(add(matmul(reshape(hx, (rows, h)), p["pool_flow"]),
                        matmul(reshape(hp, (rows, k * h)), p["pool_poi"])),
                    p["pool_b"])                                   # (rows, D)
        if lead:
            # fold the batch into columns so the node mixing stays one matmul
            batch = rows // n
            feats = reshape(permute(reshape(feats, (batch, n, self.width)),
                                    (1, 0, 2)), (n, batch * self.width))
            mixed = matmul(self._adj_t, feats)
            mixed = reshape(permute(reshape(mixed, (n, batch, self.width)),
                                    (1, 0, 2)), (rows, self.width))
        else:
            mixed = matmul(self._adj_t, feats)
        z = tanh(add(matmul(mixed, p["mlp_w1"]), p["mlp_b1"]))
        out = add(matmul(z, p["mlp_w2"]), p["mlp_b2"])             # (rows, 1)
        return reshape(out, lead + (n,))


def causal_effect(surrogate: SurrogatePredictor, h_x, h_p, k: int,
                  strategy: PerturbationStrategy, anchor=None) -> np.ndarray:
    """|anchor - counterfactual| per node for one perturbed category.

    Pass a precomputed anchor to reuse it across all K categories; it does
    not depend on k.
    """
    if not surrogate.frozen:
        raise RuntimeError("surrogate must be frozen before effect estimation")
    hx = np.asarray(h_x.data if isinstance(h_x, Tensor) else h_x)
    hp = np.asarray(h_p.data if isinstance(h_p, Tensor) else h_p)
    with no_grad():
        if anchor is None:
            anchor = surrogate.predict(hx, hp).data
        counterfactual = surrogate.predict(hx, perturb(hp, k, strategy)).data
    return np.abs(anchor - counterfactual)


def causal_weights(effects) -> np.ndarray:
    """Per-node softmax over the K category effects.

    Accepts a list of K arrays shaped (..., N) or one (..., N, K) array.
    """
    if isinstance(effects, (list, tuple)):
        effects = np.stack([np.asarray(e) for e in effects], axis=-1)
    effects = np.asarray(effects, dtype=np.float64)
    if not np.all(np.isfinite(effects)):
        raise ValueError("effects contain non-finite values")
    shifted = effects - effects.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def estimate(surrogate: SurrogatePredictor, h_x, h_p,
             strategy: PerturbationStrategy):
    """Effects and weights for every category at one observation point."""
    hx = np.asarray(h_x.data if isinstance(h_x, Tensor) else h_x)
    hp = np.asarray(h_p.data if isinstance(h_p, Tensor) else h_p)
    if not surrogate.frozen:
        raise RuntimeError("surrogate must be frozen before effect estimation")
    with no_grad():
        anchor = surrogate.predict(hx, hp).data
    effects = [causal_effect(surrogate, hx, hp, k, strategy, anchor=anchor)
               for k in range(surrogate.num_categories)]
    stacked = np.stack(effects, axis=-1)
    return stacked, causal_weights(stacked)


@dataclass
class CausalEstimator:
    """Bundles the frozen surrogate with a strategy; consulted by the encoder."""

    surrogate: SurrogatePredictor
    strategy: PerturbationStrategy
    record: list | None = None

    def weights(self, h_x, h_p) -> np.ndarray:
        effects, w = estimate(self.surrogate, h_x, h_p, self.strategy)
        if self.record is not None:
            self.record.append((effects, w))
        return w


@dataclass
class CausalEffectReport:
    obs_points: list            # observation times in day units
    effects: list               # per point, (N, K)
    weights: list               # per point, (N, K)
    strategy: str


def report_csv(report: CausalEffectReport) -> str:
    lines = ["obs_point,node,category,effect,weight"]
    for t, eff, w in zip(report.obs_points, report.effects, report.weights):
        n, k = eff.shape[-2], eff.shape[-1]
        for i in range(n):
            for j in range(k):
                lines.append(
                    f"{repr(float(t))},{i},{j},"
                    f"{repr(float(eff[i, j]))},{repr(float(w[i, j]))}"
                )
    return "\n".join(lines) + "\n"


def report_summary(report: CausalEffectReport) -> dict:
    """Mean weight per category over nodes and observation points."""
    stacked = np.stack(report.weights)          # (L, N, K)
    means = stacked.mean(axis=(0, 1))
    return {
        "strategy": report.strategy,
        "num_obs_points": len(report.obs_points),
        "mean_weight_per_category": [float(v) for v in means],
        "top_category": int(np.argmax(means)),
    }


# -- surrogate pretraining -------------------------------------------------------


def pretrain_surrogate(bundle, enc_params, enc_config, *, width=None, epochs=30,
                       lr=0.001, weight_decay=5e-4, batch_size=64,
                       seed=0) -> SurrogatePredictor:
    """Fit the surrogate on hidden states from an uncorrected dual-path pass.

    Inputs are the terminal hidden states of each training window; the
    target is the next day's per-node activity total (sum over channels, in
    normalized units).  The trained predictor is frozen before return.
    """
    from .data import normalize, window
    from .dynamics import encode_plain
    from .spline import fit_natural_cubic

    bundle = normalize(bundle)
    samples = window(bundle, enc_config.flow_window, enc_config.poi_window, 1, "train")
    if not samples:
        raise ValueError("train split produced no windows for surrogate pretraining")

    with no_grad():
        feats_x, feats_p, targets = [], [], []
        chunk = 64
        t_flow = np.linspace(0.0, 1.0, enc_config.flow_window)
        t_poi = np.linspace(0.0, 1.0, enc_config.poi_window)
        for start in range(0, len(samples), chunk):
            batch = samples[start:start + chunk]
            flow = np.stack([s.flow_window for s in batch], axis=1)   # (T,B,N,C)
            poi = np.stack([s.poi_window for s in batch], axis=1)     # (M,B,N,K)
            state = encode_plain(
                fit_natural_cubic(t_flow, flow),
                fit_natural_cubic(t_poi, poi),
                enc_params, enc_config,
            )
            feats_x.append(state.h_x.data)
            feats_p.append(state.h_p.data)
            targets.append(np.stack([s.target[0].sum(axis=-1) for s in batch]))
        feats_x = np.concatenate(feats_x)     # (W, N, H)
        feats_p = np.concatenate(feats_p)     # (W, N, K, H)
        targets = np.concatenate(targets)     # (W, N)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    surrogate = SurrogatePredictor(
        normalize_adjacency(bundle.adjacency), enc_config.hidden,
        enc_config.num_categories, width or enc_config.hidden, rng=rng,
    )
    opt = Adam(list(surrogate.params.values()), lr=lr, weight_decay=weight_decay)
    loss_cfg = LossConfig(delta=1.0)

    from .tensor import backward

    count = len(samples)
    for _ in range(epochs):
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            idx = order[start:start + batch_size]
            pred = surrogate.predict(feats_x[idx], feats_p[idx])
            loss = huber(Tensor(targets[idx]), pred, loss_cfg)
            opt.zero_grad()
            backward(loss)
            opt.step()
    surrogate.freeze()
    return surrogate
