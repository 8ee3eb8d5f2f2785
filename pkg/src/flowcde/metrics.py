"""Forecast error metrics and the horizon-structured report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MAPE_MASK_THRESHOLD",
    "MetricValues",
    "MetricReport",
    "metrics",
    "horizon_report",
    "report_to_dict",
    "format_table",
]

MAPE_MASK_THRESHOLD = 1e-3


@dataclass
class MetricValues:
    mae: float
    rmse: float
    mape_percent: float | None     # None when every element is masked out
    mape_masked_out: int


@dataclass
class MetricReport:
    model: str
    dataset: str
    horizon_mode: str              # "step" or "cumulative"
    horizons: dict                 # step label -> MetricValues
    average: MetricValues


def metrics(actual: np.ndarray, forecast: np.ndarray) -> MetricValues:
    """MAE, RMSE and masked MAPE (percent) over two equal-shape arrays.

    Elements whose actual magnitude falls below the mask threshold are
    excluded from MAPE and counted.
    """
    actual = np.asarray(actual, dtype=np.float64)
    forecast = np.asarray(forecast, dtype=np.float64)
    if actual.shape != forecast.shape:
        raise ValueError(f"metric shapes disagree: {actual.shape} vs {forecast.shape}")
    err = np.abs(actual - forecast)
    mae = float(err.mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    mask = np.abs(actual) >= MAPE_MASK_THRESHOLD
    masked_out = int((~mask).sum())
    if mask.any():
        mape = float((err[mask] / np.abs(actual[mask])).mean() * 100.0)
    else:
        mape = None
    return MetricValues(mae=mae, rmse=rmse, mape_percent=mape,
                        mape_masked_out=masked_out)


def _stack(samples) -> np.ndarray:
    arrays = [np.asarray(s.target if hasattr(s, "target") else s, dtype=np.float64)
              for s in samples]
    first = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != first:
            raise ValueError(
                f"sample {i} has shape {a.shape}, expected {first} like sample 0"
            )
    return np.stack(arrays)


def horizon_report(samples, model_outputs, model: str = "model",
                   dataset: str = "dataset", horizon_mode: str = "step") -> MetricReport:
    """Metrics at steps 7 and 14 (1-based, clipped to S) plus the all-step average.

    ``samples`` may be window samples (targets are read) or raw arrays; both
    sides stack to (windows, S, N, C) and must be in original units.
    ``horizon_mode`` "step" scores the single step; "cumulative" scores all
    steps up to and including it.
    """
    if horizon_mode not in ("step", "cumulative"):
        raise ValueError(f"unknown horizon_mode '{horizon_mode}'")
    actual = _stack(samples)
    forecast = _stack(model_outputs)
    if actual.shape != forecast.shape:
        raise ValueError(
            f"targets {actual.shape} and forecasts {forecast.shape} disagree"
        )
    steps = actual.shape[1]
    horizons = {}
    for h in sorted({min(7, steps), min(14, steps)}):
        sel = slice(h - 1, h) if horizon_mode == "step" else slice(0, h)
        horizons[str(h)] = metrics(actual[:, sel], forecast[:, sel])
    return MetricReport(
        model=model,
        dataset=dataset,
        horizon_mode=horizon_mode,
        horizons=horizons,
        average=metrics(actual, forecast),
    )


def _values_dict(v: MetricValues) -> dict:
    return {
        "mae": v.mae,
        "rmse": v.rmse,
        "mape_percent": v.mape_percent,
        "mape_masked_out": v.mape_masked_out,
    }


def report_to_dict(report: MetricReport) -> dict:
    return {
        "model": report.model,
        "dataset": report.dataset,
        "horizon_mode": report.horizon_mode,
        "horizons": {k: _values_dict(v) for k, v in report.horizons.items()},
        "average": _values_dict(report.average),
    }


def format_table(report: MetricReport) -> str:
    def fmt(v: MetricValues) -> str:
        mape = f"{v.mape_percent:10.4f}" if v.mape_percent is not None \
            else f"{'undef(' + str(v.mape_masked_out) + ')':>10}"
        return f"{v.mae:10.4f} {v.rmse:10.4f} {mape}"

    rows = [f"model: {report.model}   dataset: {report.dataset}   "
            f"horizon mode: {report.horizon_mode}",
            f"{'':12s}{'MAE':>10} {'RMSE':>10} {'MAPE %':>10}"]
    for label, vals in report.horizons.items():
        rows.append(f"Horizon {label:4s}{fmt(vals)}")
    rows.append(f"{'Average':12s}{fmt(report.average)}")
    return "\n".join(rows)
