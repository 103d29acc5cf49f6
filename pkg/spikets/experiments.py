"""Desk-scale analysis experiments built on the run pipeline.

- `run_sweep`: train and evaluate one model per (axis value, seed) for an axis in {ts, beta, encoder, backbone}.
- `run_encoder_comparison`: encoder x backbone grid with a non-convergence flag per cell.
- `run_temporal_analysis`: forecast slices (T=20, L=80) on the low- and high-frequency synthetic presets.
- `run_energy_comparison`: spiking vs. float energy of each backbone.

Results are xarray Datasets with one dimension per varied quantity plus `seed`, written as CSV next to a manifest.
A failed run is recorded with NaN metrics and `failed = 1`; the experiment carries on.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import xarray as xr
from ruamel.yaml import YAML

from spikets import pipeline
from spikets.errors import ConfigError, SpiketsError
from spikets.run_config import RunConfig, apply_overrides, config_hash, parse_run_config, to_mapping
from spikets.utils import convert_to_string

logger = logging.getLogger(__name__)

SWEEP_AXES = {
    "ts": "model.ts",
    "beta": "model.lif.beta",
    "encoder": "model.encoder",
    "backbone": "model.backbone",
}
METRICS = ("valid_rse", "valid_r2", "test_rse", "test_r2")
TS_VALUES = (4, 8, 12, 16)
BETA_VALUES = (0.99, 0.95, 0.90, 0.85, 0.80)
CONVERGENCE_R2 = 0.05


@dataclass(frozen=True)
class SweepSpec:
    """One swept axis, its values, the base configuration and the seeds of each cell."""

    axis: str
    values: tuple
    base: RunConfig = field(default_factory=RunConfig)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"Unknown sweep axis '{self.axis}', expected one of {tuple(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("A sweep needs at least one value")
        if not self.seeds:
            raise ConfigError("A sweep needs at least one seed")


def cell_config(base: RunConfig, overrides: dict, seed: int, subdir: str) -> RunConfig:
    """Configuration of one experiment cell: base + overrides, the seed applied to initialization and batch order, and
    outputs below `<base output_dir>/<subdir>`.
    """
    mapping = to_mapping(base)
    items = [f"{key}={convert_to_string(value)}" for key, value in overrides.items()]
    items += [f"seed={seed}", f"train.seed={seed}"]
    apply_overrides(mapping, items)
    mapping["output_dir"] = (Path(base.output_dir) / subdir).as_posix()
    return parse_run_config(mapping)


def train_and_evaluate(cfg: RunConfig) -> dict:
    """Train one configuration and return its validation and test metrics."""
    outputs = pipeline.train_run(cfg)
    test = pipeline.evaluate_run(outputs["checkpoint"], cfg, "test")
    valid = outputs["report"]
    return dict(valid_rse=valid.rse, valid_r2=valid.r2, test_rse=test.rse, test_r2=test.r2)


def _run_cell(cfg: RunConfig, runner: Callable[[RunConfig], dict]) -> dict:
    try:
        result = dict(runner(cfg))
        result["failed"] = 0
    except (SpiketsError, ValueError, FloatingPointError) as err:
        logger.warning("Run in %s failed: %s", cfg.output_dir, err)
        result = {metric: np.nan for metric in METRICS}
        result["failed"] = 1
    return result


def _seed_dataset(results: list, seeds: Sequence[int]) -> xr.Dataset:
    return xr.Dataset(
        data_vars={key: (["seed"], [r[key] for r in results]) for key in (*METRICS, "failed")},
        coords={"seed": list(seeds)},
    )


def aggregate(results: xr.Dataset) -> xr.Dataset:
    """Mean and standard deviation of every metric over seeds (failed runs ignored), plus the failure count."""
    summary = xr.Dataset()
    for metric in METRICS:
        summary[f"{metric}_mean"] = results[metric].mean("seed", skipna=True)
        summary[f"{metric}_std"] = results[metric].std("seed", skipna=True)
    summary["failures"] = results["failed"].sum("seed")
    return summary


def _label(value) -> str:
    return convert_to_string(value).replace("/", "_")


def write_experiment(out_dir: Path, name: str, results: xr.Dataset, summary: xr.Dataset, manifest: dict) -> dict:
    """Write `<name>_results.csv`, `<name>_summary.csv` and `manifest.yaml` into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / f"{name}_results.csv"
    summary_path = out_dir / f"{name}_summary.csv"
    results.to_dataframe().reset_index().to_csv(results_path, index=False)
    summary.to_dataframe().reset_index().to_csv(summary_path, index=False)
    manifest = dict(manifest, outputs=[results_path.name, summary_path.name])
    YAML().dump(manifest, out_dir / "manifest.yaml")
    return dict(results=results_path, summary=summary_path)


def _manifest(experiment: str, base: RunConfig, seeds, **extra) -> dict:
    return dict(
        experiment=experiment,
        seeds=list(seeds),
        base_config_hash=config_hash(base),
        base_config=to_mapping(base),
        **extra,
    )


def run_sweep(spec: SweepSpec, runner: Optional[Callable[[RunConfig], dict]] = None) -> xr.Dataset:
    """Train and evaluate every (value, seed) cell of a one-axis sweep.

    Returns:
        Dataset: Per-run metrics with dimensions (axis, seed); the seed-aggregated summary is written alongside.
    """
    runner = runner or train_and_evaluate
    key = SWEEP_AXES[spec.axis]
    datasets = []
    for value in spec.values:
        results = []
        for seed in spec.seeds:
            cfg = cell_config(spec.base, {key: value}, seed, f"{spec.axis}={_label(value)}/seed={seed}")
            results.append(_run_cell(cfg, runner))
        datasets.append(_seed_dataset(results, spec.seeds).expand_dims({spec.axis: [value]}))

    # Create dataset with all the runs
    results = xr.concat(datasets, dim=spec.axis)
    write_experiment(
        spec.base.output_path(),
        f"sweep_{spec.axis}",
        results,
        aggregate(results),
        _manifest("sweep", spec.base, spec.seeds, axis=spec.axis, values=[_plain(v) for v in spec.values]),
    )
    return results


def _plain(value):
    return value.item() if isinstance(value, np.generic) else value


def run_encoder_comparison(
    base: RunConfig,
    encoders: Sequence[str] = ("conv", "delta", "repeat"),
    backbones: Sequence[str] = ("tcn", "rnn", "ispikformer"),
    seeds: Sequence[int] = (0, 1, 2),
    runner: Optional[Callable[[RunConfig], dict]] = None,
) -> xr.Dataset:
    """Encoder x backbone grid.

    A cell is flagged `non_converged` when its mean validation R2 over seeds is below 0.05 (or every run failed).

    Returns:
        Dataset: Seed-aggregated metrics with dimensions (encoder, backbone) and the `non_converged` flag.
    """
    runner = runner or train_and_evaluate
    rows = []
    for encoder in encoders:
        cells = []
        for backbone in backbones:
            results = [
                _run_cell(
                    cell_config(
                        base,
                        {"model.encoder": encoder, "model.backbone": backbone},
                        seed,
                        f"encoder={encoder}/backbone={backbone}/seed={seed}",
                    ),
                    runner,
                )
                for seed in seeds
            ]
            cells.append(_seed_dataset(results, seeds).expand_dims({"backbone": [backbone]}))
        rows.append(xr.concat(cells, dim="backbone").expand_dims({"encoder": [encoder]}))

    results = xr.concat(rows, dim="encoder")
    summary = aggregate(results)
    summary["non_converged"] = (summary["valid_r2_mean"] < CONVERGENCE_R2) | summary["valid_r2_mean"].isnull()
    for encoder in encoders:
        for backbone in backbones:
            if bool(summary["non_converged"].sel(encoder=encoder, backbone=backbone)):
                logger.warning("%s encoder with %s backbone did not converge", encoder, backbone)
    write_experiment(
        base.output_path(),
        "encoder_comparison",
        results,
        summary,
        _manifest(
            "encoder_comparison",
            base,
            seeds,
            encoders=list(encoders),
            backbones=list(backbones),
            convergence_r2=CONVERGENCE_R2,
        ),
    )
    return summary


def run_temporal_analysis(
    base: RunConfig,
    presets: Sequence[str] = ("low", "high"),
    backbones: Sequence[str] = ("tcn", "rnn", "ispikformer"),
    lookback: int = 20,
    horizon: int = 80,
    window_index: int = 0,
    seed: int = 0,
) -> dict:
    """Train each backbone on each synthetic preset and dump one test prediction slice per pair.

    Returns:
        dict: (preset, backbone) to the prediction CSV path.
    """
    slices = {}
    metrics = []
    for preset in presets:
        for backbone in backbones:
            cfg = cell_config(
                base,
                {
                    "dataset.source": "synth",
                    "dataset.preset": preset,
                    "model.backbone": backbone,
                    "window.lookback": lookback,
                    "window.horizon": horizon,
                },
                seed,
                f"preset={preset}/backbone={backbone}",
            )
            outputs = pipeline.train_run(cfg)
            test = pipeline.evaluate_run(outputs["checkpoint"], cfg, "test")
            paths = pipeline.inspect_window(outputs["checkpoint"], cfg, window_index, "test")
            slices[(preset, backbone)] = paths["prediction"]
            metrics.append(
                xr.Dataset(
                    data_vars=dict(test_rse=test.rse, test_r2=test.r2),
                    coords=dict(preset=preset, backbone=backbone),
                ).expand_dims(["preset", "backbone"])
            )

    summary = xr.combine_by_coords(metrics)
    out = base.output_path()
    out.mkdir(parents=True, exist_ok=True)
    summary.to_dataframe().reset_index().to_csv(out / "temporal_analysis.csv", index=False)
    manifest = _manifest(
        "temporal_analysis",
        base,
        [seed],
        presets=list(presets),
        backbones=list(backbones),
        lookback=lookback,
        horizon=horizon,
        window_index=window_index,
        outputs=["temporal_analysis.csv"] + [Path(p).relative_to(out).as_posix() for p in slices.values()],
    )
    YAML().dump(manifest, out / "manifest.yaml")
    return slices


def run_energy_comparison(
    base: RunConfig, backbones: Sequence[str] = ("tcn", "rnn", "gru", "ispikformer"), seed: int = 0
) -> xr.Dataset:
    """Train each backbone and compare its spiking energy per sample with the float counterpart.

    Returns:
        Dataset: snn_mj, ann_mj and reduction_pct per backbone.
    """
    reports = []
    for backbone in backbones:
        cfg = cell_config(base, {"model.backbone": backbone}, seed, f"backbone={backbone}")
        outputs = pipeline.train_run(cfg)
        totals = pipeline.energy_run(outputs["checkpoint"], cfg).totals()
        reports.append(
            xr.Dataset(
                data_vars={key: (["backbone"], [totals[key]]) for key in ("snn_mj", "ann_mj", "reduction_pct")},
                coords=dict(backbone=[backbone]),
            )
        )

    summary = xr.concat(reports, dim="backbone")
    out = base.output_path()
    out.mkdir(parents=True, exist_ok=True)
    summary.to_dataframe().reset_index().to_csv(out / "energy_comparison.csv", index=False)
    YAML().dump(
        _manifest("energy_comparison", base, [seed], backbones=list(backbones), outputs=["energy_comparison.csv"]),
        out / "manifest.yaml",
    )
    return summary
