"""End-to-end runs: dataset preparation, training, evaluation, energy reports, inspection and forecasting.

Every run writes its outputs and a `manifest.yaml` (command, configuration hash, seed, package versions, outputs)
into the run's output directory.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import xarray as xr
from ruamel.yaml import YAML

import spikets
from spikets.checkpoint import load_checkpoint, restore, save_checkpoint
from spikets.data import (
    PARTS,
    SeriesDataset,
    denormalize,
    last_window,
    load_csv,
    normalize,
    split,
    synth_generate,
    synth_preset,
    window_arrays,
    write_csv,
)
from spikets.encoders import SpikeTrain, write_spikes_long_csv, write_spikes_wide_csv
from spikets.energy import EnergyReport, measure_energy, write_energy_report
from spikets.metrics import MetricReport, metric_report, write_metric_report
from spikets.nets import ForecastModel, build_model
from spikets.run_config import RunConfig, config_hash, to_mapping, write_run_config_yaml
from spikets.train import predict, train, write_history
from spikets.utils import file_sha256

logger = logging.getLogger(__name__)


def load_dataset(cfg: RunConfig) -> SeriesDataset:
    """The configured series, split chronologically and (optionally) normalized with train statistics."""
    dcfg = cfg.dataset
    if dcfg.source == "synth":
        ds = synth_generate(synth_preset(dcfg.preset, length=dcfg.length, seed=dcfg.seed))
    else:
        ds = load_csv(dcfg.path, has_header=dcfg.has_header, family=dcfg.family)
    ds = split(ds, dcfg.ratios)
    return normalize(ds) if dcfg.normalize else ds


def make_windows(ds: SeriesDataset, cfg: RunConfig, parts=PARTS) -> dict:
    """dict: Split part name to its (X, Y) window arrays."""
    return {part: window_arrays(ds, cfg.window, part) for part in parts}


def new_model(cfg: RunConfig, channels: int) -> ForecastModel:
    return build_model(cfg.model, cfg.window.lookback, cfg.window.horizon, channels, seed=cfg.seed)


def load_model(checkpoint: Path, cfg: RunConfig, channels: int) -> ForecastModel:
    """Build the model described by `cfg` and load the checkpoint weights (shapes must agree)."""
    state, _ = load_checkpoint(checkpoint)
    return restore(new_model(cfg, channels), state).eval()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs: list, extra: Optional[dict] = None) -> Path:
    """Record what produced the files of a run directory."""
    manifest = dict(
        command=command,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        versions=dict(spikets=spikets.__version__, numpy=np.__version__, xarray=xr.__version__),
        outputs=[Path(p).name for p in outputs],
    )
    if cfg.dataset.source == "csv":
        manifest["dataset_sha256"] = file_sha256(cfg.dataset.path)
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.yaml"
    YAML().dump(manifest, path)
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    return out


def synth_run(cfg: RunConfig) -> Path:
    """Write the configured synthetic series as `synth.csv` with its `synth.yaml` sidecar."""
    out = _out_dir(cfg)
    dcfg = cfg.dataset
    ds = synth_generate(synth_preset(dcfg.preset, length=dcfg.length, seed=dcfg.seed))
    path = write_csv(ds, out / "synth.csv")
    write_manifest(out, "synth", cfg, [path, path.with_suffix(".yaml")])
    logger.info("Wrote %d synthetic steps to %s", ds.n_steps, path.as_posix())
    return path


def train_run(cfg: RunConfig) -> dict:
    """Train a model and write its checkpoint, history, validation metrics and manifest.

    Returns:
        dict: Paths of the outputs ("checkpoint", "history", "metrics") and the validation `MetricReport`
        ("report").
    """
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    win = make_windows(ds, cfg, ("train", "valid"))
    model = new_model(cfg, ds.n_channels)
    result = train(model, win["train"], win["valid"], cfg.train)

    checkpoint = save_checkpoint(out / "checkpoint.npz", result.model, to_mapping(cfg))
    history = out / "history.csv"
    write_history(result.history, history)
    report = _report(result.model, ds, win["valid"], cfg, "valid")
    metrics = out / "valid_metrics.csv"
    write_metric_report(report, metrics)
    config_copy = out / "config.yaml"
    write_run_config_yaml(to_mapping(cfg), config_copy)
    write_manifest(
        out, "train", cfg, [checkpoint, history, metrics, config_copy], extra=dict(best_epoch=result.best_epoch)
    )
    return dict(checkpoint=checkpoint, history=history, metrics=metrics, report=report)


def _report(model: ForecastModel, ds: SeriesDataset, windows: tuple, cfg: RunConfig, part: str) -> MetricReport:
    x, y = windows
    preds = predict(model, x, cfg.train.batch_size)
    return metric_report(
        denormalize(ds, preds),
        denormalize(ds, y),
        split=part,
        lookback=cfg.window.lookback,
        backbone=cfg.model.backbone,
    )


def evaluate_run(checkpoint: Path, cfg: RunConfig, part: str = "test") -> MetricReport:
    """RSE and R2 of a checkpoint on one split part, on the original (denormalized) scale."""
    if part == "train":
        logger.warning("Evaluating on the training split; metrics will be optimistic")
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    model = load_model(checkpoint, cfg, ds.n_channels)
    report = _report(model, ds, window_arrays(ds, cfg.window, part), cfg, part)
    path = out / f"{part}_metrics.csv"
    write_metric_report(report, path)
    write_manifest(out, "eval", cfg, [path], extra=dict(split=part))
    return report


def energy_run(checkpoint: Path, cfg: RunConfig) -> EnergyReport:
    """Energy report of a checkpoint with firing rates measured on the test split."""
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    model = load_model(checkpoint, cfg, ds.n_channels)
    x, _ = window_arrays(ds, cfg.window, "test")
    report = measure_energy(model, x, cfg.model.ts, cfg.train.batch_size)
    path = out / "energy.csv"
    write_energy_report(report, path)
    write_manifest(out, "energy", cfg, [path, path.with_name("energy_totals.csv")])
    return report


def prediction_dataset(forecast: np.ndarray, truth: Optional[np.ndarray], channels: list) -> xr.Dataset:
    """Forecast (L, C), and the ground truth when known, indexed by horizon step and channel."""
    coords = dict(step=np.arange(1, forecast.shape[0] + 1), channel=channels)
    data_vars = dict(forecast=(["step", "channel"], forecast))
    if truth is not None:
        data_vars["truth"] = (["step", "channel"], truth)
    return xr.Dataset(data_vars=data_vars, coords=coords)


def _write_prediction(ds: xr.Dataset, path: Path):
    ds.to_dataframe().reset_index().sort_values(["channel", "step"]).to_csv(path, index=False)


def inspect_window(checkpoint: Path, cfg: RunConfig, index: int, part: str = "test") -> dict:
    """Dump the encoder spikes and the forecast vs. ground truth of one window.

    Raises:
        IndexError: If `index` is not a window of the split part.
    """
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    model = load_model(checkpoint, cfg, ds.n_channels)
    x, y = window_arrays(ds, cfg.window, part)
    if not 0 <= index < len(x):
        raise IndexError(f"Window index {index} out of range: the {part} split has {len(x)} windows")

    spikes = SpikeTrain(model.encoder(x[index : index + 1]).values[:, 0], ("sub_step", "t", "channel"))
    spikes_path = out / f"spikes_{part}_{index}.csv"
    write_spikes_long_csv(spikes, spikes_path)
    wide_path = out / f"spikes_{part}_{index}_wide.csv"
    write_spikes_wide_csv(spikes, wide_path, ds.channels)

    forecast = denormalize(ds, predict(model, x[index : index + 1])[0])
    prediction = prediction_dataset(forecast, denormalize(ds, y[index]), ds.channels)
    prediction_path = out / f"prediction_{part}_{index}.csv"
    _write_prediction(prediction, prediction_path)
    write_manifest(
        out, "inspect", cfg, [spikes_path, wide_path, prediction_path], extra=dict(split=part, window=index)
    )
    logger.info("Window %d: firing rate of the encoder output %.4f", index, spikes.firing_rate())
    return dict(spikes=spikes_path, spikes_wide=wide_path, prediction=prediction_path)


def forecast_run(checkpoint: Path, cfg: RunConfig) -> Path:
    """Forecast the L steps following the end of the series."""
    out = _out_dir(cfg)
    ds = load_dataset(cfg)
    model = load_model(checkpoint, cfg, ds.n_channels)
    window = last_window(ds, cfg.window.lookback)
    forecast = denormalize(ds, predict(model, window[None])[0])
    path = out / "forecast.csv"
    _write_prediction(prediction_dataset(forecast, None, ds.channels), path)
    write_manifest(out, "forecast", cfg, [path])
    return path
