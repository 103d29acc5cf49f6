import numpy as np
import pandas as pd
import pytest

from spikets.energy import (
    E_AC_PJ,
    E_MAC_PJ,
    EnergyReport,
    count_flops,
    energy,
    float_cost,
    float_input_layers,
    layer_costs,
    measure_energy,
    record_firing_rates,
    spiking_cost,
    write_energy_report,
)
from spikets.errors import MissingRateError
from spikets.layers import Affine, CausalConv1d, Module
from spikets.nets import SewCombine, build_model
from spikets.probe import ActivityProbe, active_probe
from spikets.utils import pj_to_mj


class Identity(Module):
    def forward(self, x):
        return x


def test_affine_flops(rng):
    assert count_flops(Affine(4, 3, rng), (4,)) == {"Affine": 12}


def test_conv_flops(rng):
    assert count_flops(CausalConv1d(1, 2, 3, rng), (1, 5)) == {"CausalConv1d": 30}


def test_empty_model_has_no_flops():
    assert count_flops(Identity(), (3,)) == {}


@pytest.mark.parametrize("fill, rate", [(0.0, 0.0), (1.0, 1.0)])
def test_firing_rate_extremes(rng, fill, rate):
    rates = record_firing_rates(Affine(4, 2, rng), np.full((6, 4), fill))

    assert rates == {"Affine": rate}


def test_firing_rate_half(rng):
    x = np.zeros((6, 4))
    x[:, :2] = 1.0

    assert record_firing_rates(Affine(4, 2, rng), x, batch_size=4)["Affine"] == 0.5


def test_activity_recording_is_scoped(rng):
    layer = Affine(2, 2, rng)
    with ActivityProbe(layer) as activity:
        assert active_probe() is activity
        layer(np.ones((1, 2)))
    layer(np.ones((1, 2)))

    assert active_probe() is None
    assert activity.layers["Affine"].calls == 1


def test_spiking_energy_example():
    report = energy([spiking_cost("fc", 1e9, 0.2, 4)], ts=4)

    assert report.costs[0].sops == pytest.approx(8e8)
    assert pj_to_mj(report.snn_pj) == pytest.approx(0.72)
    assert pj_to_mj(report.ann_pj) == pytest.approx(4.6)


def test_float_layer_billed_as_macs():
    report = energy([float_cost("decoder", 1e9)], ts=4)

    assert pj_to_mj(report.snn_pj) == pytest.approx(4.6)
    assert report.reduction_pct == pytest.approx(0.0)


def test_silent_layer_costs_nothing():
    assert spiking_cost("fc", 1e6, 0.0, 4).snn_pj == 0.0


def test_energy_is_monotonic_in_rate():
    costs = [spiking_cost("fc", 1e6, gamma, 4).snn_pj for gamma in np.linspace(0, 1, 11)]

    assert all(a < b for a, b in zip(costs, costs[1:]))


def test_rate_out_of_range():
    with pytest.raises(ValueError):
        spiking_cost("fc", 1e6, 1.5, 4)


def test_spiking_cheaper_below_break_even():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ts = int(rng.integers(1, 17))
        gamma = rng.uniform(0, min(1.0, E_MAC_PJ / E_AC_PJ / ts))
        flops = rng.uniform(1, 1e9)
        cost = spiking_cost("fc", flops, gamma, ts)
        if ts * gamma < E_MAC_PJ / E_AC_PJ:
            assert cost.snn_pj < cost.ann_pj


def test_report_totals_are_layer_sums():
    report = energy([spiking_cost("a", 100, 0.5, 2), spiking_cost("b", 50, 0.1, 2), float_cost("c", 10)], ts=2)
    ds = report.to_dataset()

    assert float(ds.snn_pj.sum()) == pytest.approx(report.snn_pj)
    assert float(ds.ann_pj.sum()) == pytest.approx(report.ann_pj)
    assert report.reduction().name == "reduction [%]"
    assert report.totals()["snn_mj"] == pytest.approx(pj_to_mj(report.snn_pj))
    assert "reduction" in report.format_table()


def test_layer_costs_divide_by_ts():
    costs = layer_costs({"a": 400, "dec": 30}, {"dec"}, {"a": 0.25}, ts=4)

    assert costs[0].flops == 100 and costs[0].sops == 100
    assert costs[1].is_float_layer and costs[1].flops == 30


def test_missing_rate():
    with pytest.raises(MissingRateError):
        layer_costs({"a": 400}, set(), {}, ts=4)


def test_doubling_ts_doubles_sops(small_model_config):
    x_shape = (8, 2)
    small = build_model(small_model_config(backbone="rnn", encoder="repeat", ts=2, readout="rate"), 8, 4, 2, seed=5)
    large = build_model(small_model_config(backbone="rnn", encoder="repeat", ts=4, readout="rate"), 8, 4, 2, seed=5)
    rates = {name: 0.3 for name in count_flops(small, x_shape)}

    costs_small = layer_costs(count_flops(small, x_shape), float_input_layers(small), rates, ts=2)
    costs_large = layer_costs(count_flops(large, x_shape), float_input_layers(large), rates, ts=4)

    for a, b in zip(costs_small, costs_large):
        assert a.name == b.name
        if a.is_float_layer:
            assert b.snn_pj == pytest.approx(a.snn_pj)
        else:
            assert b.sops == pytest.approx(2 * a.sops)


@pytest.mark.parametrize("backbone", ["tcn", "rnn", "gru", "ispikformer"])
def test_measure_energy(small_model_config, backbone):
    model = build_model(small_model_config(backbone=backbone), 8, 4, 2)
    x = np.random.default_rng(0).normal(size=(5, 8, 2)).astype(np.float32)

    report = measure_energy(model, x, ts=2, batch_size=2)

    names = [c.name for c in report.costs]
    assert len(names) == len(set(names))
    assert "decoder.proj" in names
    assert all(0.0 <= c.gamma <= 1.0 for c in report.costs)
    assert report.ann_pj > 0
    assert model.training


def test_write_energy_report(tmp_path):
    report = EnergyReport([spiking_cost("a", 100, 0.5, 2), float_cost("b", 10)], ts=2)
    path = tmp_path / "energy.csv"

    write_energy_report(report, path)

    table = pd.read_csv(path)
    assert table.layer.tolist() == ["a", "b"]
    totals = pd.read_csv(tmp_path / "energy_totals.csv")
    assert totals.loc[0, "ts"] == 2
    assert totals.loc[0, "reduction_pct"] == pytest.approx(report.reduction_pct)


@pytest.mark.parametrize("backbone", ["tcn", "ispikformer"])
def test_sew_connectors_are_not_billed(small_model_config, backbone):
    model = build_model(small_model_config(backbone=backbone), 8, 4, 2)
    x = np.random.default_rng(1).normal(size=(3, 8, 2)).astype(np.float32)
    sew = [name for name, module in model.named_modules() if isinstance(module, SewCombine)]

    with ActivityProbe(model) as activity:
        model(x)
    report = measure_energy(model, x, ts=2)

    assert sew
    assert all(activity.layers[name].macs == 0 for name in sew)
    assert not set(sew) & set(count_flops(model, (8, 2)))
    assert not set(sew) & {c.name for c in report.costs}
