"""Time-series datasets: synthetic generation, CSV ingestion, chronological splits, normalization and windows.

A `SeriesDataset` holds the full (N, C) series. Splitting only records the chronological boundaries; windows are
always cut inside one part, so no (X, Y) pair crosses a boundary.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import xarray as xr
from numpy.lib.stride_tricks import sliding_window_view
from ruamel.yaml import YAML

from spikets.errors import (
    ConfigError,
    DegenerateSplitError,
    EmptyFileError,
    NonNumericCellError,
    RaggedRowError,
    SplitTooShortError,
)

logger = logging.getLogger(__name__)

PARTS = ("train", "valid", "test")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class DatasetFamily:
    """Reference statistics of a public benchmark, used as defaults when loading its CSV export."""

    name: str
    samples: int
    variables: int
    lookback: int
    ratios: tuple


DATASET_FAMILIES = {
    "metr-la": DatasetFamily("metr-la", 34272, 207, 12, (0.7, 0.2, 0.1)),
    "pems-bay": DatasetFamily("pems-bay", 52116, 325, 12, (0.7, 0.2, 0.1)),
    "solar": DatasetFamily("solar", 52560, 137, 168, (0.6, 0.2, 0.2)),
    "electricity": DatasetFamily("electricity", 26304, 321, 168, (0.6, 0.2, 0.2)),
}


@dataclass
class SeriesDataset:
    """A multivariate series with optional split boundaries and normalization statistics.

    Args:
        values (np.ndarray): Float array of shape (N, C); rows are time steps.
        channels (list): Channel names.
        train_end (int): First row after the train part (None until split).
        valid_end (int): First row after the valid part (None until split).
        mean (np.ndarray): Per-channel train mean (None until normalized).
        std (np.ndarray): Per-channel train standard deviation, clamped below (None until normalized).
        meta (dict): Provenance, e.g. synthetic parameters or the source file.
    """

    values: np.ndarray
    channels: list
    train_end: Optional[int] = None
    valid_end: Optional[int] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.channels) != self.values.shape[1]:
            raise ValueError(f"{len(self.channels)} channel names for {self.values.shape[1]} columns")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_end is not None

    @property
    def is_normalized(self) -> bool:
        return self.mean is not None

    def bounds(self, part: str) -> tuple:
        """tuple: (start, stop) rows of a split part."""
        if not self.is_split:
            raise DegenerateSplitError("Dataset has not been split")
        if part == "train":
            return 0, self.train_end
        elif part == "valid":
            return self.train_end, self.valid_end
        elif part == "test":
            return self.valid_end, self.n_steps
        raise ValueError(f"Unknown split part '{part}', expected one of {PARTS}")

    def part(self, name: str) -> np.ndarray:
        start, stop = self.bounds(name)
        return self.values[start:stop]

    def to_dataarray(self) -> xr.DataArray:
        return xr.DataArray(self.values, dims=("time", "channel"), coords={"channel": self.channels}, name="value")


@dataclass(frozen=True)
class WindowSpec:
    """Lookback T, horizon L and stride of the sliding windows."""

    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError(
                f"lookback, horizon and stride must be >= 1, got {self.lookback}, {self.horizon}, {self.stride}"
            )

    @property
    def span(self) -> int:
        return self.lookback + self.horizon


Range = Union[float, Sequence[float]]


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of A1 sin(w1 t) + A2 sin(w2 t + phi) + N(0, sigma).

    Amplitudes and phase are either fixed values or (lo, hi) ranges sampled uniformly once per series.
    """

    a1: Range = (1.0, 5.0)
    a2: Range = (1.0, 2.0)
    omega1: float = 5e-3
    omega2: float = 0.04 * math.pi
    phi: Range = 0.0
    sigma: float = 0.3
    length: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.length < 1:
            raise ConfigError(f"length must be >= 1, got {self.length}")


SYNTH_PRESETS = {
    "low": dict(a1=(1.0, 5.0), a2=(1.0, 2.0), omega1=5e-3, omega2=0.04 * math.pi, phi=0.0, sigma=0.3),
    "high": dict(a1=9.0, a2=8.0, omega1=5e-3, omega2=0.1 * math.pi, phi=(0.0, 10.0), sigma=0.5),
}


def synth_preset(name: str, length: int = 5000, seed: int = 0) -> SynthConfig:
    """SynthConfig of a named preset ("low" or "high")."""
    if name not in SYNTH_PRESETS:
        raise ConfigError(f"Unknown synthetic preset '{name}', expected one of {tuple(SYNTH_PRESETS)}")
    return SynthConfig(length=length, seed=seed, **SYNTH_PRESETS[name])


def _sample(rng: np.random.Generator, value: Range) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    lo, hi = value
    return float(rng.uniform(lo, hi))


def synth_generate(cfg: SynthConfig) -> SeriesDataset:
    """Sample the synthetic formula at t = 0 .. length - 1 (univariate).

    Amplitudes and phase are drawn first, then the noise, all from `np.random.default_rng(cfg.seed)`. The values
    actually used are stored in `meta`.
    """
    rng = np.random.default_rng(cfg.seed)
    a1, a2, phi = _sample(rng, cfg.a1), _sample(rng, cfg.a2), _sample(rng, cfg.phi)
    t = np.arange(cfg.length, dtype=np.float64)
    series = a1 * np.sin(cfg.omega1 * t) + a2 * np.sin(cfg.omega2 * t + phi)
    if cfg.sigma > 0:
        series = series + rng.normal(0.0, cfg.sigma, size=cfg.length)
    meta = dict(
        source="synth",
        seed=cfg.seed,
        length=cfg.length,
        a1=a1,
        a2=a2,
        omega1=cfg.omega1,
        omega2=cfg.omega2,
        phi=phi,
        sigma=cfg.sigma,
    )
    return SeriesDataset(series[:, None], ["x"], meta=meta)


def write_csv(ds: SeriesDataset, path: Path, sidecar: bool = True) -> Path:
    """Write the series as a CSV with a header of channel names, plus a `<name>.yaml` sidecar with `meta`.

    Returns:
        Path: The CSV path.
    """
    path = Path(path)
    ds.to_dataarray().to_pandas().to_csv(path, index=False)
    if sidecar:
        YAML().dump({k: _plain(v) for k, v in ds.meta.items()}, path.with_suffix(".yaml"))
    return path


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def load_csv(path: Union[str, Path], has_header: bool = True, family: Optional[str] = None) -> SeriesDataset:
    """Read a rectangular numeric CSV: rows are time steps, columns channels.

    Args:
        path: File to read.
        has_header (bool): Whether the first row holds channel names.
        family (str): Optional dataset family; a warning is logged when the shape disagrees with it.

    Raises:
        FileNotFoundError: If the file does not exist.
        EmptyFileError: If there are no data rows.
        RaggedRowError: If a row has a different number of cells than the first row.
        NonNumericCellError: If a cell is not a number.
    """
    fname = Path(path)
    if not fname.is_file():
        raise FileNotFoundError(f"File not found: {fname.as_posix()}")

    with open(fname, newline="") as f:
        rows = [(n, row) for n, row in enumerate(csv.reader(f), start=1) if row and any(c.strip() for c in row)]

    channels = None
    if has_header and rows:
        channels = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise EmptyFileError(f"No data rows in {fname.as_posix()}")

    width = len(channels) if channels is not None else len(rows[0][1])
    values = np.empty((len(rows), width), dtype=np.float32)
    for i, (line, row) in enumerate(rows):
        if len(row) != width:
            raise RaggedRowError(f"{fname.as_posix()}, line {line}: expected {width} cells, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise NonNumericCellError(
                    f"{fname.as_posix()}, line {line}, column {j + 1}: '{cell}' is not a number"
                ) from None

    if channels is None:
        channels = [f"c{j}" for j in range(width)]
    meta = dict(source="csv", path=fname.as_posix())
    if family is not None:
        meta["family"] = family
        ref = DATASET_FAMILIES.get(family)
        if ref is None:
            raise ConfigError(f"Unknown dataset family '{family}', expected one of {tuple(DATASET_FAMILIES)}")
        if values.shape != (ref.samples, ref.variables):
            logger.warning(
                "%s has shape %s, the %s family has %d samples and %d variables",
                fname.as_posix(),
                values.shape,
                family,
                ref.samples,
                ref.variables,
            )
    logger.info("Loaded %s: %d steps, %d channels", fname.as_posix(), values.shape[0], values.shape[1])
    return SeriesDataset(values, channels, meta=meta)


def split(ds: SeriesDataset, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> SeriesDataset:
    """Chronological train/valid/test split at floor(N * train) and floor(N * (train + valid)).

    Raises:
        DegenerateSplitError: If the ratios do not sum to 1 or a part ends up empty.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DegenerateSplitError(f"Expected three non-negative ratios, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DegenerateSplitError(f"Split ratios must sum to 1, got {sum(ratios)}")
    n = ds.n_steps
    # tolerance absorbs representation error, e.g. 0.7 + 0.2 < 0.9
    train_end = math.floor(n * ratios[0] + 1e-9)
    valid_end = math.floor(n * (ratios[0] + ratios[1]) + 1e-9)
    sizes = (train_end, valid_end - train_end, n - valid_end)
    if min(sizes) < 1:
        raise DegenerateSplitError(f"Split of {n} steps with ratios {tuple(ratios)} gives part sizes {sizes}")
    return replace(ds, train_end=train_end, valid_end=valid_end)


def normalize(ds: SeriesDataset) -> SeriesDataset:
    """Per-channel z-score with statistics from the train part only (std clamped below at 1e-8)."""
    train = ds.part("train").astype(np.float64)
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), STD_FLOOR)
    values = (ds.values - mean) / std
    return replace(ds, values=values, mean=mean, std=std)


def denormalize(ds: SeriesDataset, values: np.ndarray) -> np.ndarray:
    """Map normalized values (any shape ending in C) back to the original scale."""
    if not ds.is_normalized:
        return np.asarray(values)
    return (np.asarray(values, dtype=np.float64) * ds.std + ds.mean).astype(np.float32)


def window_count(n_steps: int, spec: WindowSpec) -> int:
    """int: Number of windows of a part with `n_steps` rows."""
    return max(0, (n_steps - spec.span) // spec.stride + 1)


def window_arrays(ds: SeriesDataset, spec: WindowSpec, part: str = "train") -> tuple:
    """All (X, Y) windows of one split part as arrays of shape (M, T, C) and (M, L, C).

    Raises:
        SplitTooShortError: If the part is shorter than T + L.
    """
    values = ds.part(part) if ds.is_split else ds.values
    if values.shape[0] < spec.span:
        raise SplitTooShortError(
            f"The {part} part has {values.shape[0]} steps, windows need {spec.span} (T={spec.lookback}, "
            f"L={spec.horizon})"
        )
    # (M, C, span) -> (M, span, C)
    win = sliding_window_view(values, spec.span, axis=0)[:: spec.stride].transpose(0, 2, 1)
    return np.ascontiguousarray(win[:, : spec.lookback]), np.ascontiguousarray(win[:, spec.lookback :])


def windows(ds: SeriesDataset, spec: WindowSpec, part: str = "train") -> Iterator[tuple]:
    """Iterate over the (X, Y) windows of one split part."""
    x, y = window_arrays(ds, spec, part)
    yield from zip(x, y)


def last_window(ds: SeriesDataset, lookback: int) -> np.ndarray:
    """The final `lookback` rows of the whole series, shape (T, C)."""
    if ds.n_steps < lookback:
        raise SplitTooShortError(f"Series has {ds.n_steps} steps, lookback is {lookback}")
    return ds.values[-lookback:]
