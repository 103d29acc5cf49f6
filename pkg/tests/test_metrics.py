import logging

import numpy as np
import pandas as pd
import pytest

from spikets.errors import DegenerateTargetError, ShapeError
from spikets.metrics import metric_report, r2, r2_positions, rse, write_metric_report


@pytest.fixture()
def pair(rng):
    truths = rng.normal(size=(7, 4, 3))
    preds = truths + rng.normal(scale=0.5, size=truths.shape)
    return preds, truths


def _rse_loops(preds, truths):
    m, horizon, channels = truths.shape
    mean = sum(truths[i, j, k] for i in range(m) for j in range(horizon) for k in range(channels)) / truths.size
    num = den = 0.0
    for i in range(m):
        for j in range(horizon):
            for k in range(channels):
                num += (truths[i, j, k] - preds[i, j, k]) ** 2
                den += (truths[i, j, k] - mean) ** 2
    return (num / den) ** 0.5


def _r2_loops(preds, truths):
    m, horizon, channels = truths.shape
    scores = []
    for j in range(horizon):
        for k in range(channels):
            mean = sum(truths[i, j, k] for i in range(m)) / m
            num = sum((truths[i, j, k] - preds[i, j, k]) ** 2 for i in range(m))
            den = sum((truths[i, j, k] - mean) ** 2 for i in range(m))
            scores.append(1 - num / den)
    return sum(scores) / len(scores)


def test_perfect_forecast(pair):
    _, truths = pair

    assert rse(truths, truths) == 0.0
    assert r2(truths, truths) == 1.0


def test_global_mean_predictor_has_unit_rse(pair):
    _, truths = pair

    assert rse(np.full_like(truths, truths.mean()), truths) == pytest.approx(1.0)


def test_position_mean_predictor_has_zero_r2(pair):
    _, truths = pair
    preds = np.broadcast_to(truths.mean(axis=0), truths.shape)

    assert r2(preds, truths) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_against_loops(seed):
    rng = np.random.default_rng(seed)
    truths = rng.normal(size=(5, 3, 2))
    preds = rng.normal(size=(5, 3, 2))

    assert rse(preds, truths) == pytest.approx(_rse_loops(preds, truths), abs=1e-6)
    assert r2(preds, truths) == pytest.approx(_r2_loops(preds, truths), abs=1e-6)


def test_rse_constant_truth():
    with pytest.raises(DegenerateTargetError):
        rse(np.zeros((2, 2, 1)), np.ones((2, 2, 1)))


def test_r2_skips_constant_positions(pair, caplog):
    preds, truths = pair
    truths = truths.copy()
    truths[:, 0, 0] = 3.0

    with caplog.at_level(logging.WARNING):
        score = r2(preds, truths)

    assert "Skipped 1 of 12" in caplog.text
    assert np.isnan(r2_positions(preds, truths)[0, 0])
    assert score == pytest.approx(np.nanmean(r2_positions(preds, truths)))


def test_r2_all_constant():
    with pytest.raises(DegenerateTargetError):
        r2(np.zeros((3, 2, 1)), np.ones((3, 2, 1)))


def test_shape_checks():
    with pytest.raises(ShapeError):
        rse(np.zeros((2, 2, 1)), np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        r2(np.zeros((2, 2)), np.zeros((2, 2)))


def test_metric_report(pair, tmp_path):
    preds, truths = pair
    report = metric_report(preds, truths, split="valid", lookback=12, backbone="gru")

    assert report.m == 7 and report.horizon == 4
    assert len(report.rse_by_horizon) == 4
    assert report.rse == pytest.approx(rse(preds, truths))
    assert report.to_dataset().attrs["backbone"] == "gru"

    path = tmp_path / "valid_metrics.csv"
    write_metric_report(report, path)

    table = pd.read_csv(path)
    assert table.loc[0, "split"] == "valid"
    assert table.loc[0, "r2"] == pytest.approx(report.r2)
    by_step = pd.read_csv(tmp_path / "valid_metrics_by_horizon.csv")
    assert by_step.step.tolist() == [1, 2, 3, 4]
