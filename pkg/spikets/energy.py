"""Theoretical energy model of spiking vs. float execution.

For a layer with FLOPs counted per sample and per SNN step (the count of its float counterpart), and firing rate
gamma of its input spikes:

    SOPs   = Ts * gamma * FLOPs
    E_snn  = E_AC * SOPs        (spiking layers)
    E_snn  = E_MAC * FLOPs      (layers consuming float values: first encoder map, decoder)
    E_ann  = E_MAC * FLOPs      (every layer of the float counterpart)

Batch normalization is folded into the preceding layer, and neither spiking nonlinearities nor SEW residual
additions are multiply-accumulates, so none of them is counted in either column.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import xarray as xr

from spikets.errors import MissingRateError
from spikets.layers import Module
from spikets.probe import ActivityProbe
from spikets.utils import pj_to_mj

logger = logging.getLogger(__name__)

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass(frozen=True)
class LayerCost:
    """Cost of one layer for one sample.

    Args:
        name (str): Dotted layer name.
        flops (float): MACs of the float counterpart, per sample and SNN step.
        gamma (float): Firing rate of the layer's input spikes (0 for float layers).
        sops (float): Synaptic operations, Ts * gamma * flops (0 for float layers).
        is_float_layer (bool): The layer consumes float values and is billed as MACs.
    """

    name: str
    flops: float
    gamma: float
    sops: float
    is_float_layer: bool

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"Firing rate of '{self.name}' must be in [0, 1], got {self.gamma}")

    @property
    def snn_pj(self) -> float:
        return E_MAC_PJ * self.flops if self.is_float_layer else E_AC_PJ * self.sops

    @property
    def ann_pj(self) -> float:
        return E_MAC_PJ * self.flops


def spiking_cost(name: str, flops: float, gamma: float, ts: int) -> LayerCost:
    return LayerCost(name=name, flops=flops, gamma=gamma, sops=ts * gamma * flops, is_float_layer=False)


def float_cost(name: str, flops: float) -> LayerCost:
    return LayerCost(name=name, flops=flops, gamma=0.0, sops=0.0, is_float_layer=True)


def _profile(model: Module, batches) -> ActivityProbe:
    was_training = model.training
    model.eval()
    try:
        with ActivityProbe(model) as probe:
            for batch in batches:
                model(batch)
    finally:
        model.train(was_training)
    return probe


def count_flops(model: Module, input_shape: tuple) -> dict:
    """MAC counts per layer for one sample and one full forward pass (all SNN sub-steps).

    Args:
        model (Module): Model or single layer.
        input_shape (tuple): Shape of one sample, without the batch axis.

    Returns:
        dict: Layer name to MAC count. Layers without MACs are omitted.
    """
    probe = _profile(model, [np.zeros((1,) + tuple(input_shape), dtype=np.float32)])
    return {name: activity.macs for name, activity in probe.layers.items() if activity.macs > 0}


def float_input_layers(model: Module) -> set:
    """set: Names of the layers consuming float values."""
    return {name for name, module in model.named_modules() if getattr(module, "float_input", False)}


def record_firing_rates(model: Module, x: np.ndarray, batch_size: int = 128) -> dict:
    """Measure, per layer, the fraction of nonzero entries among its inputs over all windows in `x`."""
    probe = _profile(model, [x[i : i + batch_size] for i in range(0, len(x), batch_size)])
    rates = {name: activity.firing_rate for name, activity in probe.layers.items()}
    for name, rate in rates.items():
        logger.debug("firing rate of %s: %.4f", name, rate)
    return rates


def layer_costs(flops: dict, float_layers: set, rates: dict, ts: int) -> list:
    """Combine MAC counts (per sample, whole forward) and firing rates into per-layer costs.

    Spiking layers run once per SNN sub-step, so their per-step FLOPs are the counted MACs divided by Ts.

    Raises:
        MissingRateError: If a spiking layer has no firing rate.
    """
    costs = []
    for name, macs in flops.items():
        if name in float_layers:
            costs.append(float_cost(name, float(macs)))
            continue
        if name not in rates:
            raise MissingRateError(f"No firing rate recorded for spiking layer '{name}'")
        costs.append(spiking_cost(name, macs / ts, float(rates[name]), ts))
    return costs


@dataclass
class EnergyReport:
    costs: list
    ts: int

    @property
    def snn_pj(self) -> float:
        return float(sum(c.snn_pj for c in self.costs))

    @property
    def ann_pj(self) -> float:
        return float(sum(c.ann_pj for c in self.costs))

    @property
    def reduction_pct(self) -> float:
        """float: 100 * (1 - E_snn / E_ann), in percent."""
        return 100.0 * (1.0 - self.snn_pj / self.ann_pj) if self.ann_pj > 0 else 0.0

    def to_dataset(self) -> xr.Dataset:
        ds = xr.Dataset(
            data_vars=dict(
                flops=(["layer"], [c.flops for c in self.costs]),
                gamma=(["layer"], [c.gamma for c in self.costs]),
                sops=(["layer"], [c.sops for c in self.costs]),
                is_float=(["layer"], [c.is_float_layer for c in self.costs]),
                snn_pj=(["layer"], [c.snn_pj for c in self.costs]),
                ann_pj=(["layer"], [c.ann_pj for c in self.costs]),
            ),
            coords=dict(layer=[c.name for c in self.costs]),
            attrs=dict(ts=self.ts),
        )
        return ds

    def reduction(self) -> xr.DataArray:
        """Per-layer energy reduction of the spiking model over the float counterpart, in percent."""
        ds = self.to_dataset()
        reduction = (1 - ds.snn_pj / ds.ann_pj.where(ds.ann_pj > 0)) * 100
        reduction.name = "reduction [%]"
        return reduction

    def totals(self) -> dict:
        return dict(
            ts=self.ts,
            snn_pj=self.snn_pj,
            ann_pj=self.ann_pj,
            snn_mj=pj_to_mj(self.snn_pj),
            ann_mj=pj_to_mj(self.ann_pj),
            reduction_pct=self.reduction_pct,
        )

    def format_table(self) -> str:
        lines = [f"{'layer':<40} {'FLOPs':>14} {'gamma':>8} {'SOPs':>14} {'pJ':>14}"]
        for c in self.costs:
            lines.append(f"{c.name:<40} {c.flops:>14.0f} {c.gamma:>8.4f} {c.sops:>14.0f} {c.snn_pj:>14.1f}")
        totals = self.totals()
        lines.append(
            f"SNN {totals['snn_mj']:.6f} mJ, float {totals['ann_mj']:.6f} mJ, reduction {self.reduction_pct:.2f}%"
        )
        return "\n".join(lines)


def energy(costs: list, ts: int) -> EnergyReport:
    """Energy report of a list of layer costs simulated for `ts` SNN sub-steps."""
    return EnergyReport(costs=list(costs), ts=ts)


def measure_energy(model: Module, x: np.ndarray, ts: int, batch_size: int = 128) -> EnergyReport:
    """Count FLOPs, measure firing rates on windows `x` (M, T, C), and build the energy report."""
    flops = count_flops(model, x.shape[1:])
    rates = record_firing_rates(model, x, batch_size)
    report = energy(layer_costs(flops, float_input_layers(model), rates, ts), ts)
    logger.info("Energy per sample: SNN %.3e pJ, float %.3e pJ", report.snn_pj, report.ann_pj)
    return report


def write_energy_report(report: EnergyReport, path: Path):
    """Write per-layer costs as CSV and the totals to `<name>_totals.csv`."""
    path = Path(path)
    report.to_dataset().to_dataframe().to_csv(path)
    totals = xr.Dataset({key: ("run", [value]) for key, value in report.totals().items()})
    totals.to_dataframe().to_csv(path.with_name(f"{path.stem}_totals.csv"), index=False)
