"""Forecast quality metrics: root relative squared error and the per-position coefficient of determination.

Predictions and ground truths have shape (M, L, C): M samples, horizon L, C channels.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import xarray as xr

from spikets.errors import DegenerateTargetError, ShapeError

logger = logging.getLogger(__name__)


def _check(preds, truths) -> tuple:
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise ShapeError(f"Predictions {preds.shape} and ground truths {truths.shape} differ in shape")
    if preds.ndim != 3 or preds.shape[0] < 1:
        raise ShapeError(f"Expected arrays of shape (M, L, C) with M >= 1, got {preds.shape}")
    return preds, truths


def rse(preds, truths) -> float:
    """sqrt(sum (Y - Y_hat)^2 / sum (Y - mean(Y))^2), with the mean taken over every element.

    Raises:
        DegenerateTargetError: If the ground truth is constant.
    """
    preds, truths = _check(preds, truths)
    denominator = np.sum((truths - truths.mean()) ** 2)
    if denominator == 0:
        raise DegenerateTargetError("RSE is undefined for a constant ground truth")
    return float(np.sqrt(np.sum((truths - preds) ** 2) / denominator))


def r2_positions(preds, truths) -> np.ndarray:
    """Coefficient of determination at every (l, c) position, NaN where the truth has zero variance."""
    preds, truths = _check(preds, truths)
    residual = np.sum((truths - preds) ** 2, axis=0)
    total = np.sum((truths - truths.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = 1.0 - residual / total
    scores[total == 0] = np.nan
    return scores


def r2(preds, truths) -> float:
    """R^2 averaged over horizon positions and channels, each position using its own across-sample mean.

    Positions whose ground truth is constant across samples are skipped with a warning.

    Raises:
        DegenerateTargetError: If every position is constant.
    """
    scores = r2_positions(preds, truths)
    skipped = int(np.isnan(scores).sum())
    if skipped == scores.size:
        raise DegenerateTargetError("R2 is undefined: every (horizon, channel) position has zero variance")
    if skipped:
        logger.warning("Skipped %d of %d zero-variance positions when computing R2", skipped, scores.size)
    return float(np.nanmean(scores))


@dataclass
class MetricReport:
    """RSE and R2 of one evaluation, with an optional per-horizon breakdown."""

    rse: float
    r2: float
    m: int
    split: str = "test"
    lookback: Optional[int] = None
    horizon: Optional[int] = None
    backbone: Optional[str] = None
    rse_by_horizon: list = field(default_factory=list)
    r2_by_horizon: list = field(default_factory=list)

    def to_dataset(self) -> xr.Dataset:
        ds = xr.Dataset(
            data_vars=dict(
                rse=self.rse,
                r2=self.r2,
                m=self.m,
            ),
            attrs=dict(split=self.split, lookback=self.lookback, horizon=self.horizon, backbone=self.backbone),
        )
        if self.rse_by_horizon:
            steps = np.arange(1, len(self.rse_by_horizon) + 1)
            ds["rse_by_horizon"] = xr.DataArray(self.rse_by_horizon, dims=["step"], coords={"step": steps})
            ds["r2_by_horizon"] = xr.DataArray(self.r2_by_horizon, dims=["step"], coords={"step": steps})
        return ds

    def summary(self) -> dict:
        return dict(
            split=self.split,
            backbone=self.backbone,
            lookback=self.lookback,
            horizon=self.horizon,
            m=self.m,
            rse=self.rse,
            r2=self.r2,
        )


def metric_report(
    preds, truths, split: str = "test", lookback=None, backbone=None, by_horizon: bool = True
) -> MetricReport:
    """Compute RSE and R2 (overall and, optionally, per horizon step)."""
    preds, truths = _check(preds, truths)
    report = MetricReport(
        rse=rse(preds, truths),
        r2=r2(preds, truths),
        m=preds.shape[0],
        split=split,
        lookback=lookback,
        horizon=preds.shape[1],
        backbone=backbone,
    )
    if by_horizon:
        for step in range(preds.shape[1]):
            p, t = preds[:, step : step + 1], truths[:, step : step + 1]
            try:
                report.rse_by_horizon.append(rse(p, t))
                report.r2_by_horizon.append(r2(p, t))
            except DegenerateTargetError:
                report.rse_by_horizon.append(float("nan"))
                report.r2_by_horizon.append(float("nan"))
    return report


def write_metric_report(report: MetricReport, path: Path):
    """Write a report as a one-row CSV (plus a `<name>_by_horizon.csv` when the breakdown is present)."""
    path = Path(path)
    summary = xr.Dataset({key: ("run", [value]) for key, value in report.summary().items() if value is not None})
    summary.to_dataframe().to_csv(path, index=False)
    if report.rse_by_horizon:
        ds = report.to_dataset()
        ds[["rse_by_horizon", "r2_by_horizon"]].to_dataframe().to_csv(path.with_name(f"{path.stem}_by_horizon.csv"))
