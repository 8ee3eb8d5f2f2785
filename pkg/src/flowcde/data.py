"""Dataset handling for the two-timescale forecasting problem.

A bundle holds a daily flow tensor (days, N, C), a monthly POI tensor
(months, N, K), an adjacency matrix, the day-to-month alignment, and
chronological train/val/test day ranges.  On-disk form is a manifest JSON
plus three CSV files so real city data can be imported with a text editor
and a spreadsheet.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "NormStats",
    "DatasetBundle",
    "WindowSample",
    "SynthConfig",
    "load",
    "save_dataset",
    "normalize",
    "denormalize",
    "window",
    "synth_generate",
    "ha_baseline",
]

STD_FLOOR = 1e-6
POI_WALK_BASE = 5.0
POI_WALK_STD = 0.5
FLOW_BASE_RANGE = (5.0, 15.0)
CHANNEL_SCALE_RANGE = (0.4, 1.6)


@dataclass
class NormStats:
    flow_mean: np.ndarray    # (N, C)
    flow_std: np.ndarray     # (N, C)
    poi_mean: np.ndarray     # (N, K)
    poi_std: np.ndarray      # (N, K)


@dataclass
class DatasetBundle:
    name: str
    flow: np.ndarray         # (days, N, C)
    poi: np.ndarray          # (months, N, K)
    adjacency: np.ndarray    # (N, N)
    node_ids: list
    day_to_month: np.ndarray  # (days,) ints
    splits: dict             # name -> (start_day, end_day), half-open
    norm_stats: NormStats | None = None
    normalized: bool = False

    @property
    def num_nodes(self) -> int:
        return self.flow.shape[1]

    @property
    def num_channels(self) -> int:
        return self.flow.shape[2]

    @property
    def num_categories(self) -> int:
        return self.poi.shape[2]


@dataclass
class WindowSample:
    flow_window: np.ndarray   # (T, N, C)
    poi_window: np.ndarray    # (M, N, K)
    target: np.ndarray        # (S, N, C)
    anchor_day: int


@dataclass
class SynthConfig:
    num_nodes: int = 20
    num_channels: int = 2
    num_categories: int = 4
    days: int = 720
    days_per_month: int = 30
    planted_category: int = 1
    planted_strength: float = 2.0
    noise_std: float = 0.1
    ar_coefficient: float = 0.5
    category_correlation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.planted_category < self.num_categories:
            raise ValueError("planted_category out of range")
        if self.planted_strength < 0:
            raise ValueError("planted_strength must be non-negative")
        if not abs(self.ar_coefficient) < 1:
            raise ValueError("ar_coefficient must have magnitude < 1")
        if not 0 <= self.category_correlation < 1:
            raise ValueError("category_correlation must be in [0, 1)")
        if self.days_per_month < 1 or self.days < 2 * self.days_per_month:
            raise ValueError("need at least two synthetic months")


def _validate_bundle(b: DatasetBundle):
    days, n, _ = b.flow.shape
    months = b.poi.shape[0]
    if b.poi.shape[1] != n:
        raise ValueError(f"flow has {n} nodes but poi has {b.poi.shape[1]}")
    if b.adjacency.shape != (n, n):
        raise ValueError(f"adjacency shape {b.adjacency.shape}, expected ({n}, {n})")
    if len(b.day_to_month) != days:
        raise ValueError("day_to_month must cover every day")
    d2m = np.asarray(b.day_to_month)
    if np.any(np.diff(d2m) < 0):
        raise ValueError("day_to_month must be non-decreasing")
    if d2m.min() < 0 or d2m.max() >= months:
        raise ValueError("day_to_month points outside the poi range")
    ordered = [b.splits[k] for k in ("train", "val", "test")]
    if ordered[0][0] != 0 or ordered[-1][1] != days:
        raise ValueError("splits must cover [0, days)")
    for (a0, a1), (b0, _) in zip(ordered, ordered[1:]):
        if a1 != b0 or a0 >= a1:
            raise ValueError(f"splits must be contiguous and ordered, got {b.splits}")
    if np.any(b.adjacency < 0):
        raise ValueError("adjacency weights must be non-negative")
    if np.any((b.adjacency + np.eye(n)).sum(axis=1) <= 0):
        raise ValueError("adjacency has an unreachable node even with self-loops")


# -- normalization -------------------------------------------------------------


def _stats_from_train(b: DatasetBundle) -> NormStats:
    lo, hi = b.splits["train"]
    if hi <= lo:
        raise ValueError("train split is empty")
    flow_tr = b.flow[lo:hi]
    flow_mean = flow_tr.mean(axis=0)
    flow_std = flow_tr.std(axis=0)
    last_month = int(b.day_to_month[hi - 1])
    poi_tr = b.poi[: last_month + 1]
    poi_mean = poi_tr.mean(axis=0)
    poi_std = poi_tr.std(axis=0)
    floored = int((flow_std < STD_FLOOR).sum() + (poi_std < STD_FLOOR).sum())
    if floored:
        warnings.warn(f"{floored} constant channel(s): std floored to {STD_FLOOR}")
    return NormStats(
        flow_mean=flow_mean, flow_std=np.maximum(flow_std, STD_FLOOR),
        poi_mean=poi_mean, poi_std=np.maximum(poi_std, STD_FLOOR),
    )


def normalize(bundle: DatasetBundle) -> DatasetBundle:
    """Per-node-channel z-score using train-split statistics only."""
    if bundle.normalized:
        return bundle
    stats = bundle.norm_stats or _stats_from_train(bundle)
    return replace(
        bundle,
        flow=(bundle.flow - stats.flow_mean) / stats.flow_std,
        poi=(bundle.poi - stats.poi_mean) / stats.poi_std,
        norm_stats=stats,
        normalized=True,
    )


def denormalize(forecast: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map normalized flow forecasts (..., N, C) back to original units."""
    return forecast * stats.flow_std + stats.flow_mean


# -- windowing -----------------------------------------------------------------


def window(bundle: DatasetBundle, flow_len: int, poi_len: int, horizon: int,
           split: str) -> list:
    """Stride-1 samples fully inside one split.

    A sample anchored at day a holds flow days a-T+1..a, the M most recent
    monthly steps at or before a's month, and the target days a+1..a+S.
    Anchors whose month history is shorter than M are skipped.
    """
    lo, hi = bundle.splits[split]
    need = flow_len + horizon
    if hi - lo < need:
        raise ValueError(
            f"split '{split}' spans {hi - lo} days; windowing needs at least {need}"
        )
    samples = []
    for anchor in range(lo + flow_len - 1, hi - horizon):
        month = int(bundle.day_to_month[anchor])
        if month < poi_len - 1:
            continue
        samples.append(WindowSample(
            flow_window=bundle.flow[anchor - flow_len + 1: anchor + 1],
            poi_window=bundle.poi[month - poi_len + 1: month + 1],
            target=bundle.flow[anchor + 1: anchor + 1 + horizon],
            anchor_day=anchor,
        ))
    return samples


# -- synthetic generator -------------------------------------------------------


def synth_generate(cfg: SynthConfig) -> DatasetBundle:
    """Planted-causality dataset: exactly one POI category drives the flow.

    POI categories follow non-negative random walks month to month; flow is
    an affine function of the planted category's previous monthly value plus
    AR(1) noise.  The one-month lag means a flow forecast that crosses a
    month boundary can only be informed by the POI series, never by the
    recent flow history alone.  With category_correlation > 0 the walks
    share a per-node monthly growth factor, so non-causal categories
    correlate with the flow in sample while their idiosyncratic components
    drift apart over time.  Everything derives from the config seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    n, c, k = cfg.num_nodes, cfg.num_channels, cfg.num_categories
    months = -(-cfg.days // cfg.days_per_month)
    day_to_month = np.arange(cfg.days) // cfg.days_per_month

    poi = np.empty((months, n, k))
    poi[0] = np.abs(rng.normal(POI_WALK_BASE, 1.0, size=(n, k)))
    rho = cfg.category_correlation
    for m in range(1, months):
        if rho > 0.0:
            shared = rng.normal(0.0, POI_WALK_STD, size=(n, 1))
            own = rng.normal(0.0, POI_WALK_STD, size=(n, k))
            step = np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own
        else:
            step = rng.normal(0.0, POI_WALK_STD, size=(n, k))
        poi[m] = np.maximum(poi[m - 1] + step, 0.0)

    base = rng.uniform(*FLOW_BASE_RANGE, size=(n, c))
    # channel 0 couples with unit scale so a regression on it recovers the
    # planted strength directly
    scale = np.concatenate([[1.0], rng.uniform(*CHANNEL_SCALE_RANGE, size=c - 1)])

    noise = np.zeros((cfg.days, n, c))
    innov = rng.normal(0.0, cfg.noise_std, size=(cfg.days, n, c)) \
        if cfg.noise_std > 0 else np.zeros((cfg.days, n, c))
    prev = np.zeros((n, c))
    for d in range(cfg.days):
        prev = cfg.ar_coefficient * prev + innov[d]
        noise[d] = prev

    lagged_month = np.maximum(day_to_month - 1, 0)
    planted = poi[lagged_month][:, :, cfg.planted_category]     # (days, N)
    flow = base + cfg.planted_strength * planted[:, :, None] * scale + noise

    adjacency = np.eye(n)
    for i in range(n):
        adjacency[i, (i + 1) % n] = 1.0
        adjacency[i, (i - 1) % n] = 1.0

    train_end = int(cfg.days * 0.7)
    val_end = int(cfg.days * 0.8)
    bundle = DatasetBundle(
        name=f"synth-{cfg.seed}",
        flow=flow,
        poi=poi,
        adjacency=adjacency,
        node_ids=[f"n{i:03d}" for i in range(n)],
        day_to_month=day_to_month,
        splits={"train": (0, train_end), "val": (train_end, val_end),
                "test": (val_end, cfg.days)},
    )
    _validate_bundle(bundle)
    bundle.norm_stats = _stats_from_train(bundle)
    return bundle


# -- serialization ---------------------------------------------------------------


def save_dataset(bundle: DatasetBundle, out_dir) -> Path:
    """Write manifest.json plus flow/poi/adj CSVs; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    days, n, c = bundle.flow.shape
    months, _, k = bundle.poi.shape

    lines = ["day,node," + ",".join(f"c{j}" for j in range(c))]
    for d in range(days):
        for i in range(n):
            vals = ",".join(repr(float(v)) for v in bundle.flow[d, i])
            lines.append(f"{d},{i},{vals}")
    (out / "flow.csv").write_text("\n".join(lines) + "\n")

    lines = ["month,node," + ",".join(f"k{j}" for j in range(k))]
    for m in range(months):
        for i in range(n):
            vals = ",".join(repr(float(v)) for v in bundle.poi[m, i])
            lines.append(f"{m},{i},{vals}")
    (out / "poi.csv").write_text("\n".join(lines) + "\n")

    lines = ["src,dst,weight"]
    src_idx, dst_idx = np.nonzero(bundle.adjacency)
    for s, t in zip(src_idx, dst_idx):
        lines.append(f"{s},{t},{repr(float(bundle.adjacency[s, t]))}")
    (out / "adj.csv").write_text("\n".join(lines) + "\n")

    manifest = {
        "name": bundle.name,
        "nodes": n,
        "channels": c,
        "categories": [f"k{j}" for j in range(k)],
        "days": days,
        "months": months,
        "day_to_month": [int(m) for m in bundle.day_to_month],
        "node_ids": list(bundle.node_ids),
        "splits": {name: [int(a), int(b)] for name, (a, b) in bundle.splits.items()},
        "files": {"flow": "flow.csv", "poi": "poi.csv", "adj": "adj.csv"},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _parse_cell(text: str, path: Path, line_no: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"{path.name} row {line_no}: bad {what} '{text}'") from None
    if not np.isfinite(v):
        raise ValueError(f"{path.name} row {line_no}: non-finite {what}")
    return v


def _parse_int(text: str, path: Path, line_no: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"{path.name} row {line_no}: bad {what} '{text}'") from None


def _read_grid_csv(path: Path, steps: int, nodes: int, width: int,
                   step_name: str) -> np.ndarray:
    """Read a (step,node,values...) CSV laid out step-major, node-minor."""
    if not path.exists():
        raise FileNotFoundError(f"missing data file {path}")
    lines = path.read_text().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    expected_cols = 2 + width
    if not lines or len(lines[0].split(",")) != expected_cols:
        raise ValueError(
            f"{path.name} row 1: expected {expected_cols} columns in header"
        )
    data_rows = len(lines) - 1
    if data_rows != steps * nodes:
        if data_rows % steps == 0:
            raise ValueError(
                f"{path.name}: manifest declares {nodes} nodes but the file "
                f"holds {data_rows // steps} per {step_name}"
            )
        raise ValueError(
            f"{path.name}: expected {steps * nodes} data rows "
            f"({steps} {step_name}s x {nodes} nodes), found {data_rows}"
        )
    out = np.empty((steps, nodes, width))
    line_no = 1
    for s in range(steps):
        for i in range(nodes):
            line_no += 1
            parts = lines[line_no - 1].strip().split(",")
            if len(parts) != expected_cols:
                raise ValueError(
                    f"{path.name} row {line_no}: expected {expected_cols} "
                    f"columns, got {len(parts)}"
                )
            got_s = _parse_int(parts[0], path, line_no, step_name)
            got_i = _parse_int(parts[1], path, line_no, "node")
            if got_s != s or got_i != i:
                raise ValueError(
                    f"{path.name} row {line_no}: expected {step_name} {s} "
                    f"node {i}, got {step_name} {got_s} node {got_i}"
                )
            for j, cell in enumerate(parts[2:]):
                out[s, i, j] = _parse_cell(cell, path, line_no, f"value c{j}")
    return out


def load(manifest_path) -> DatasetBundle:
    """Load and validate a dataset directory from its manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("nodes", "channels", "categories", "days", "months",
                "day_to_month", "splits", "files"):
        if key not in manifest:
            raise ValueError(f"manifest missing key '{key}'")
    n = int(manifest["nodes"])
    c = int(manifest["channels"])
    k = len(manifest["categories"])
    days = int(manifest["days"])
    months = int(manifest["months"])
    base = manifest_path.parent

    flow = _read_grid_csv(base / manifest["files"]["flow"], days, n, c, "day")
    poi = _read_grid_csv(base / manifest["files"]["poi"], months, n, k, "month")

    adj_path = base / manifest["files"]["adj"]
    if not adj_path.exists():
        raise FileNotFoundError(f"missing data file {adj_path}")
    adjacency = np.zeros((n, n))
    with adj_path.open() as fh:
        fh.readline()
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 3:
                raise ValueError(f"{adj_path.name} row {line_no}: expected 3 columns")
            s = _parse_int(parts[0], adj_path, line_no, "src")
            t = _parse_int(parts[1], adj_path, line_no, "dst")
            if not (0 <= s < n and 0 <= t < n):
                raise ValueError(
                    f"{adj_path.name} row {line_no}: node index out of range "
                    f"for {n} nodes"
                )
            w = _parse_cell(parts[2], adj_path, line_no, "weight")
            if w < 0:
                raise ValueError(f"{adj_path.name} row {line_no}: negative weight")
            adjacency[s, t] = w

    bundle = DatasetBundle(
        name=manifest.get("name", manifest_path.parent.name),
        flow=flow,
        poi=poi,
        adjacency=adjacency,
        node_ids=list(manifest.get("node_ids", [str(i) for i in range(n)])),
        day_to_month=np.asarray(manifest["day_to_month"], dtype=int),
        splits={name: tuple(v) for name, v in manifest["splits"].items()},
    )
    _validate_bundle(bundle)
    bundle.norm_stats = _stats_from_train(bundle)
    return bundle


# -- historical average baseline -------------------------------------------------


def ha_baseline(bundle: DatasetBundle, split: str, horizon: int, anchors=None):
    """Weekday-mean forecasts from all history before the split.

    Returns (anchors, forecasts) where each forecast has shape (S, N, C).
    Pass the anchor days of windowed samples to align with model outputs.
    """
    lo, hi = bundle.splits[split]
    if lo < 7:
        raise ValueError(
            f"historical average needs a full week of history before the split; "
            f"split '{split}' starts at day {lo}"
        )
    history = bundle.flow[:lo]
    weekday_mean = np.stack([
        history[np.arange(lo) % 7 == w].mean(axis=0) for w in range(7)
    ])
    if anchors is None:
        # default anchors whose full target range lies inside the split
        anchors = list(range(lo - 1, hi - horizon))
    forecasts = []
    for a in anchors:
        steps = [(a + 1 + s) % 7 for s in range(horizon)]
        forecasts.append(weekday_mean[steps])
    return list(anchors), forecasts
