"""Error metrics and the horizon report."""

import numpy as np
import pytest

from flowcde.data import WindowSample
from flowcde.metrics import (
    MAPE_MASK_THRESHOLD,
    format_table,
    horizon_report,
    metrics,
    report_to_dict,
)


def test_perfect_forecast_scores_zero():
    x = np.arange(1.0, 13.0).reshape(3, 4)
    v = metrics(x, x.copy())
    assert v.mae == 0.0 and v.rmse == 0.0
    assert v.mape_percent == 0.0 and v.mape_masked_out == 0


def test_hand_values():
    v = metrics(np.array([2.0, 4.0]), np.array([3.0, 2.0]))
    assert v.mae == 1.5
    assert abs(v.rmse - np.sqrt(2.5)) <= 1e-12
    assert abs(v.mape_percent - 50.0) <= 1e-12      # (1/2 + 2/4)/2 * 100


def test_mape_masks_near_zero_actuals():
    v = metrics(np.array([0.0, 4.0]), np.array([1.0, 2.0]))
    assert v.mape_masked_out == 1
    assert abs(v.mape_percent - 50.0) <= 1e-12
    borderline = metrics(np.array([MAPE_MASK_THRESHOLD / 2, 4.0]),
                         np.array([0.0, 4.0]))
    assert borderline.mape_masked_out == 1


def test_all_masked_mape_is_undefined():
    v = metrics(np.zeros(5), np.ones(5))
    assert v.mape_percent is None
    assert v.mape_masked_out == 5
    assert v.mae == 1.0


def test_mae_rmse_are_symmetric_and_scale_equivariant():
    rng = np.random.default_rng(0)
    a, f = rng.normal(size=40) + 5.0, rng.normal(size=40) + 5.0
    ab, ba = metrics(a, f), metrics(f, a)
    assert ab.mae == ba.mae and ab.rmse == ba.rmse
    scaled = metrics(3.0 * a, 3.0 * f)
    assert abs(scaled.mae - 3.0 * ab.mae) <= 1e-12
    assert abs(scaled.rmse - 3.0 * ab.rmse) <= 1e-12
    assert abs(scaled.mape_percent - ab.mape_percent) <= 1e-9


def test_rmse_dominates_mae():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a = rng.normal(size=rng.integers(2, 20))
        f = rng.normal(size=a.shape)
        v = metrics(a, f)
        assert v.rmse >= v.mae - 1e-15


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="metric shapes disagree"):
        metrics(np.zeros(3), np.zeros(4))


def _samples(values):
    return [WindowSample(flow_window=None, poi_window=None,
                         target=np.asarray(t, dtype=np.float64), anchor_day=i)
            for i, t in enumerate(values)]


def test_horizon_report_step_mode():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(5, 14, 2, 1)) + 10.0
    pred = truth + 0.5
    report = horizon_report(_samples(truth), list(pred), model="m",
                            dataset="d")
    assert sorted(report.horizons) == ["14", "7"]
    exp7 = metrics(truth[:, 6:7], pred[:, 6:7])
    assert report.horizons["7"].mae == exp7.mae
    assert report.horizons["7"].rmse == exp7.rmse
    assert report.average.mae == metrics(truth, pred).mae


def test_horizon_report_clips_to_short_targets():
    rng = np.random.default_rng(3)
    truth = rng.normal(size=(4, 5, 2, 1))
    report = horizon_report(list(truth), list(truth + 1.0))
    assert list(report.horizons) == ["5"]           # min(7,5) == min(14,5)


def test_horizon_report_cumulative_mode():
    rng = np.random.default_rng(4)
    truth = rng.normal(size=(3, 14, 2, 1))
    pred = truth + rng.normal(size=truth.shape)
    report = horizon_report(list(truth), list(pred),
                            horizon_mode="cumulative")
    exp = metrics(truth[:, :7], pred[:, :7])
    assert report.horizons["7"].mae == exp.mae
    assert report.horizons["14"].mae == report.average.mae
    with pytest.raises(ValueError, match="horizon_mode"):
        horizon_report(list(truth), list(pred), horizon_mode="rolling")


def test_horizon_report_rejects_drifting_shapes():
    good = np.zeros((2, 3, 1))
    bad = np.zeros((2, 4, 1))
    with pytest.raises(ValueError, match="sample 1 has shape"):
        horizon_report([good, bad], [good, good])
    with pytest.raises(ValueError, match="disagree"):
        horizon_report([good, good], [bad, bad])


def test_report_serialization_and_table():
    rng = np.random.default_rng(5)
    truth = rng.normal(size=(3, 14, 2, 1)) + 10.0
    report = horizon_report(list(truth), list(truth + 0.25), model="cde",
                            dataset="synth")
    doc = report_to_dict(report)
    assert doc["model"] == "cde" and doc["horizon_mode"] == "step"
    assert set(doc["horizons"]) == {"7", "14"}
    assert doc["average"]["mae"] == report.average.mae
    table = format_table(report)
    assert "Horizon 7" in table and "Horizon 14" in table and "Average" in table

    undef = horizon_report(list(np.zeros((2, 3, 1, 1))),
                           list(np.ones((2, 3, 1, 1))))
    assert "undef(" in format_table(undef)
    assert report_to_dict(undef)["average"]["mape_percent"] is None
