"""Spike encoders: turn float windows (B, T, C) into spike trains (Ts, B, T, C).

Three kinds are available:

- `delta`: per-step differences x_t - x_{t-1} (the first difference is zero), expanded to Ts features by an affine
  map, batch-normalized, and fed to a spiking layer as Ts sub-step currents.
- `conv`: a bank of Ts causal temporal kernels shared across channels, batch-normalized, and fed to a spiking
  layer.
- `repeat`: the raw value repeated as the current of each of the Ts sub-steps, no weights.

Neuron state starts from reset at every series step; within a step the membrane persists across the Ts
sub-steps.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import xarray as xr

from spikets import autodiff as ad
from spikets.autodiff import DiffArray, as_diff_array
from spikets.errors import NonBinaryError, ShapeError
from spikets.layers import Affine, BatchNorm, CausalConv1d, Module, SpikingLayer
from spikets.lif import LifConfig

logger = logging.getLogger(__name__)

ENCODER_KINDS = ("delta", "conv", "repeat")


@dataclass
class SpikeTrain:
    """Binary spike array with named dimensions, e.g. ("sub_step", "batch", "t", "channel")."""

    data: np.ndarray
    dims: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != len(self.dims):
            raise ShapeError(f"Spike train has {self.data.ndim} axes but {len(self.dims)} dimension names")
        check_binary(self.data, "spike train")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def firing_rate(self) -> float:
        return float(self.data.mean()) if self.data.size else 0.0

    def to_dataarray(self) -> xr.DataArray:
        return xr.DataArray(self.data.astype(np.int8), dims=self.dims, name="spike")


def check_binary(values, what: str = "input"):
    """Raise NonBinaryError unless every entry is exactly 0 or 1."""
    values = np.asarray(getattr(values, "values", values))
    if not np.all((values == 0) | (values == 1)):
        raise NonBinaryError(f"{what} must be binary, found values outside {{0, 1}}")


def _as_batch(x) -> DiffArray:
    x = as_diff_array(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ShapeError(f"Expected a window of shape (T, C) or (B, T, C), got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("Windows must have at least one time step")
    return x


class Encoder(Module):
    """Common interface: `forward(x)` maps (B, T, C) or (T, C) floats to (Ts, B, T, C) spikes."""

    kind: str = ""

    def __init__(self, ts: int, lif: LifConfig):
        super().__init__()
        self.ts = ts
        self.lif = lif


class DeltaEncoder(Encoder):
    kind = "delta"

    def __init__(self, ts: int, lif: LifConfig, rng: np.random.Generator, bn_eps: float = 1e-5, bn_momentum=0.1):
        super().__init__(ts, lif)
        self.proj = Affine(1, ts, rng, float_input=True)
        self.bn = BatchNorm(ts, feature_axis=-1, eps=bn_eps, momentum=bn_momentum)
        self.sn = SpikingLayer(lif)

    def forward(self, x) -> DiffArray:
        x = _as_batch(x)
        steps = x.shape[1]
        # x_0 is taken equal to x_1, so the first difference is zero
        prev = ad.concat([x[:, :1, :], x[:, : steps - 1, :]], axis=1)
        diff = x - prev
        currents = self.bn(self.proj(diff.reshape(*diff.shape, 1)))
        return self.sn(currents.transpose(3, 0, 1, 2))


class ConvEncoder(Encoder):
    kind = "conv"

    def __init__(
        self,
        ts: int,
        lif: LifConfig,
        rng: np.random.Generator,
        kernel_size: int = 3,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.1,
    ):
        super().__init__(ts, lif)
        self.conv = CausalConv1d(1, ts, kernel_size, rng, float_input=True)
        self.bn = BatchNorm(ts, feature_axis=1, eps=bn_eps, momentum=bn_momentum)
        self.sn = SpikingLayer(lif)

    def forward(self, x) -> DiffArray:
        x = _as_batch(x)
        batch, steps, channels = x.shape
        series = x.transpose(0, 2, 1).reshape(batch * channels, 1, steps)
        currents = self.bn(self.conv(series))
        currents = currents.reshape(batch, channels, self.ts, steps).transpose(2, 0, 3, 1)
        return self.sn(currents)


class RepeatEncoder(Encoder):
    kind = "repeat"

    def __init__(self, ts: int, lif: LifConfig):
        super().__init__(ts, lif)
        self.sn = SpikingLayer(lif)

    def forward(self, x) -> DiffArray:
        x = _as_batch(x)
        return self.sn(ad.stack([x] * self.ts, axis=0))


def build_encoder(
    kind: str,
    ts: int,
    lif: LifConfig,
    rng: np.random.Generator,
    kernel_size: int = 3,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.1,
) -> Encoder:
    """Create an encoder by kind name ("delta", "conv" or "repeat")."""
    if kind == "delta":
        return DeltaEncoder(ts, lif, rng, bn_eps=bn_eps, bn_momentum=bn_momentum)
    elif kind == "conv":
        return ConvEncoder(ts, lif, rng, kernel_size=kernel_size, bn_eps=bn_eps, bn_momentum=bn_momentum)
    elif kind == "repeat":
        return RepeatEncoder(ts, lif)
    raise ValueError(f"Unknown encoder kind '{kind}', expected one of {ENCODER_KINDS}")


def delta_encode(x, encoder: DeltaEncoder) -> SpikeTrain:
    """Delta-encode one window (T, C) or a batch (B, T, C)."""
    return _encode(x, encoder)


def conv_encode(x, encoder: ConvEncoder) -> SpikeTrain:
    """Convolution-encode one window (T, C) or a batch (B, T, C)."""
    return _encode(x, encoder)


def repeat_encode(x, encoder: RepeatEncoder) -> SpikeTrain:
    """Repetition-encode one window (T, C) or a batch (B, T, C)."""
    return _encode(x, encoder)


def _encode(x, encoder: Encoder) -> SpikeTrain:
    single = as_diff_array(x).ndim == 2
    out = encoder(x).values
    if single:
        return SpikeTrain(out[:, 0], ("sub_step", "t", "channel"))
    return SpikeTrain(out, ("sub_step", "batch", "t", "channel"))


def spikes_long_form(train: SpikeTrain) -> xr.Dataset:
    """Long form of a single-window train: one row per (t, sub_step, channel) with its spike value."""
    if train.dims != ("sub_step", "t", "channel"):
        raise ShapeError(f"Expected a single-window spike train, got dims {train.dims}")
    da = train.to_dataarray().transpose("t", "sub_step", "channel")
    return da.to_dataset()


def write_spikes_long_csv(train: SpikeTrain, path: Path):
    """Write the (t, sub_step, channel, spike) table of a single-window train."""
    spikes_long_form(train).to_dataframe().reset_index().to_csv(path, index=False)


def write_spikes_wide_csv(train: SpikeTrain, path: Path, channels=None):
    """Write a single-window train with one row per (t, sub_step) and one column per channel."""
    if train.dims != ("sub_step", "t", "channel"):
        raise ShapeError(f"Expected a single-window spike train, got dims {train.dims}")
    ts, steps, n_channels = train.shape
    table = train.data.transpose(1, 0, 2).reshape(steps * ts, n_channels).astype(np.int8)
    da = xr.DataArray(
        table,
        dims=("row", "channel"),
        coords={"channel": list(channels) if channels is not None else [f"c{i}" for i in range(n_channels)]},
    )
    frame = da.to_pandas()
    frame.insert(0, "sub_step", np.tile(np.arange(ts), steps))
    frame.insert(0, "t", np.repeat(np.arange(steps), ts))
    frame.to_csv(path, index=False)
