import numpy as np
import pytest

from spikets.autodiff import DiffArray, Tape, backward
from spikets.errors import ConfigError, NonBinaryError, ShapeError
from spikets.layers import SpikingLayer
from spikets.lif import LifConfig
from spikets.nets import (
    BACKBONES,
    Decoder,
    ISpikformer,
    ModelConfig,
    RnnConfig,
    SpikeGru,
    SpikeRnn,
    SpikeTcn,
    SpikingSelfAttention,
    TcnConfig,
    build_model,
    decode,
    gru_update,
    sew_combine,
    spiking_attention,
)
from spikets.train import Adam, mse_loss


def _zero_parameters(module, keep=()):
    for name, param in module.named_parameters():
        if name not in keep:
            param.values[...] = 0.0


def _ones(ts, steps):
    return DiffArray(np.ones((ts, 1, steps, 1)))


@pytest.mark.parametrize(
    "mode, expected",
    [("ADD", [0, 1, 1, 2]), ("AND", [0, 0, 0, 1]), ("IAND", [0, 1, 0, 0])],
)
def test_sew_truth_table(mode, expected):
    a = DiffArray([0.0, 0.0, 1.0, 1.0])
    b = DiffArray([0.0, 1.0, 0.0, 1.0])

    assert sew_combine(a, b, mode).values.tolist() == expected


def test_sew_errors():
    with pytest.raises(ShapeError):
        sew_combine(DiffArray([1.0]), DiffArray([1.0, 0.0]))
    with pytest.raises(NonBinaryError):
        sew_combine(DiffArray([2.0]), DiffArray([1.0]))
    with pytest.raises(ValueError):
        sew_combine(DiffArray([1.0]), DiffArray([1.0]), "OR")


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(backbone="lstm")
    with pytest.raises(ConfigError):
        ModelConfig(encoder="rate")
    with pytest.raises(ConfigError):
        ModelConfig(ts=0)
    with pytest.raises(ConfigError):
        ModelConfig(sew_mode="XOR")


def test_tcn_kernel_follows_lookback():
    assert TcnConfig().resolved_kernel(24) == 3
    assert TcnConfig().resolved_kernel(25) == 16
    assert TcnConfig(kernel_size=5).resolved_kernel(96) == 5


def test_tcn_zero_input_is_silent(rng, small_model_config):
    tcn = SpikeTcn(2, 6, small_model_config(), rng).eval()
    for name, param in tcn.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            param.values[...] = 0.0

    out = tcn(DiffArray(np.zeros((2, 3, 6, 2))))

    assert out.shape == (2, 3, 4 * 6)
    assert out.values.sum() == 0


def test_tcn_is_causal(rng, small_model_config, random_spikes):
    tcn = SpikeTcn(2, 6, small_model_config(), rng).eval()
    s = random_spikes((2, 1, 6, 2))
    base = tcn(DiffArray(s)).values.reshape(2, 1, 4, 6)

    changed = s.copy()
    changed[:, :, 5] = 1.0 - changed[:, :, 5]
    out = tcn(DiffArray(changed)).values.reshape(2, 1, 4, 6)

    np.testing.assert_array_equal(out[..., :5], base[..., :5])


@pytest.mark.parametrize("training", [True, False])
def test_tcn_sequential_matches_batched(rng, small_model_config, random_spikes, training):
    tcn = SpikeTcn(3, 7, small_model_config(ts=3), rng).train(training)
    s = DiffArray(random_spikes((3, 4, 7, 3), seed=1))

    np.testing.assert_array_equal(tcn(s).values, tcn(s, sequential=True).values)


def test_tcn_rejects_float_input(rng, small_model_config):
    tcn = SpikeTcn(1, 4, small_model_config(), rng)

    with pytest.raises(NonBinaryError):
        tcn(DiffArray(np.full((2, 1, 4, 1), 0.5)))


def _tiny_rnn(cls, rng, hidden=1, ts=1):
    return cls(1, ModelConfig(ts=ts, rnn=RnnConfig(hidden=hidden)), rng)


def test_rnn_zero_weights_are_silent(rng, small_model_config, random_spikes):
    rnn = SpikeRnn(2, small_model_config(), rng)
    _zero_parameters(rnn)

    assert rnn(DiffArray(random_spikes((2, 3, 5, 2)))).values.sum() == 0


def test_rnn_two_neuron_trace(rng):
    rnn = _tiny_rnn(SpikeRnn, rng, hidden=2)
    _zero_parameters(rnn)
    rnn.input_proj.weight.values[...] = [[0.6, 1.2]]

    # neuron 0 charges 0.6 then 0.594 + 0.6; neuron 1 fires on both steps
    assert rnn(_ones(1, 1)).values.tolist() == [[[0.0, 1.0]]]
    assert rnn(_ones(1, 2)).values.tolist() == [[[1.0, 1.0]]]


def test_rnn_is_order_sensitive(rng):
    rnn = _tiny_rnn(SpikeRnn, rng)
    _zero_parameters(rnn)
    rnn.input_proj.weight.values[...] = 1.2

    first = DiffArray(np.array([1.0, 0.0]).reshape(1, 1, 2, 1))
    last = DiffArray(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))

    assert rnn(first).values.item() == 0.0
    assert rnn(last).values.item() == 1.0


def test_rnn_state_persists_across_steps(rng):
    rnn = _tiny_rnn(SpikeRnn, rng)
    _zero_parameters(rnn)
    rnn.input_proj.weight.values[...] = 0.6

    assert rnn(_ones(1, 2)).values.item() == 1.0
    assert rnn(_ones(1, 2), reset_at={1}).values.item() == 0.0


def test_gru_update_is_a_multiplexer():
    h = DiffArray([0.0, 1.0, 0.0, 1.0])
    n = DiffArray([1.0, 0.0, 0.0, 1.0])

    assert gru_update(DiffArray(np.ones(4)), h, n).values.tolist() == h.values.tolist()
    assert gru_update(DiffArray(np.zeros(4)), h, n).values.tolist() == n.values.tolist()


@pytest.mark.parametrize("steps, expected", [(1, 0.0), (2, 1.0), (3, 0.0)])
def test_gru_single_cell_trace(rng, steps, expected):
    gru = _tiny_rnn(SpikeGru, rng)
    _zero_parameters(gru)
    gru.w_n.weight.values[...] = 0.6

    # z never fires, so h follows the candidate neuron: 0, 1, 0
    assert gru(_ones(1, steps)).values.item() == expected


def test_gru_state_persists_across_steps(rng):
    gru = _tiny_rnn(SpikeGru, rng)
    _zero_parameters(gru)
    gru.w_n.weight.values[...] = 0.6

    assert gru(_ones(1, 2), reset_at={1}).values.item() == 0.0


def test_attention_single_token():
    q = DiffArray([[[1.0, 0.0, 1.0]]])
    k = DiffArray([[[1.0, 1.0, 1.0]]])
    v = DiffArray([[[1.0, 0.0, 1.0]]])

    out = spiking_attention(q, k, v, 0.125, SpikingLayer(LifConfig(u_thr=0.25)))

    assert out.values.tolist() == [[[1.0, 0.0, 1.0]]]


def test_attention_projections_are_binary(rng, small_model_config, random_spikes):
    attn = SpikingSelfAttention(small_model_config(backbone="ispikformer"), rng)
    x = DiffArray(random_spikes((2, 3, 4, 8)))

    for name in ("q", "k", "v"):
        assert set(np.unique(attn.project(name, x).values)) <= {0.0, 1.0}
    assert set(np.unique(attn(x).values)) <= {0.0, 1.0}


def test_ispikformer_is_channel_equivariant(rng, small_model_config, random_spikes):
    model = ISpikformer(5, small_model_config(backbone="ispikformer"), rng).eval()
    s = random_spikes((2, 1, 5, 4), seed=3)
    perm = [2, 0, 3, 1]

    out = model(DiffArray(s)).values
    permuted = model(DiffArray(s[..., perm])).values

    assert out.shape == (2, 1, 4, 8)
    np.testing.assert_array_equal(permuted, out[:, :, perm])


def test_decoder_zero_spikes_give_bias(rng):
    decoder = Decoder(6, 3, 2, 4, rng)
    out = decode(DiffArray(np.zeros((4, 5, 6))), decoder)

    assert out.shape == (5, 3, 2)
    np.testing.assert_allclose(out.values, np.broadcast_to(decoder.proj.bias.values.reshape(3, 2), (5, 3, 2)))


def test_per_channel_decoder_zero_spikes_give_bias(rng):
    decoder = Decoder(6, 3, 2, 4, rng, per_channel=True)
    out = decoder(DiffArray(np.zeros((4, 5, 2, 6))))

    assert out.shape == (5, 3, 2)
    np.testing.assert_allclose(out.values[0, :, 1], decoder.proj.bias.values)


@pytest.mark.parametrize("readout", ["rate", "flatten"])
def test_decoder_is_affine(rng, readout):
    decoder = Decoder(6, 3, 2, 4, rng, readout=readout)
    a, b = rng.random((4, 5, 6)), rng.random((4, 5, 6))
    bias = decoder(DiffArray(np.zeros((4, 5, 6)))).values

    lhs = decoder(DiffArray(a + b)).values - bias
    rhs = (decoder(DiffArray(a)).values - bias) + (decoder(DiffArray(b)).values - bias)

    np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-5)


def test_decoder_rejects_readout(rng):
    with pytest.raises(ConfigError):
        Decoder(6, 3, 2, 4, rng, readout="last")


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("horizon", [6, 24, 48, 96])
def test_forecast_shape(small_model_config, backbone, horizon):
    model = build_model(small_model_config(backbone=backbone), lookback=8, horizon=horizon, channels=2)
    out = model(np.random.default_rng(0).normal(size=(2, 8, 2)))

    assert out.shape == (2, horizon, 2)
    assert np.all(np.isfinite(out.values))


def test_forecast_rejects_wrong_window(small_model_config):
    model = build_model(small_model_config(), lookback=8, horizon=4, channels=2)

    with pytest.raises(ShapeError):
        model(np.zeros((2, 7, 2)))


def test_build_model_rejects_empty_dims(small_model_config):
    with pytest.raises(ConfigError):
        build_model(small_model_config(), lookback=0, horizon=4, channels=2)


def test_build_model_is_seeded(small_model_config):
    a = build_model(small_model_config(), 8, 4, 2, seed=3).state_dict()
    b = build_model(small_model_config(), 8, 4, 2, seed=3).state_dict()

    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("encoder", ["delta", "conv", "repeat"])
def test_end_to_end_gradients(small_model_config, backbone, encoder):
    rng = np.random.default_rng(1)
    model = build_model(small_model_config(backbone=backbone, encoder=encoder), 8, 4, 2)
    with Tape():
        loss = mse_loss(model(rng.normal(size=(4, 8, 2))), rng.normal(size=(4, 4, 2)))
    backward(loss)

    grads = [p.grad for p in model.parameters() if p.grad is not None]
    assert grads
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert any(np.any(g != 0) for g in grads)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_hidden_spikes_are_binary(small_model_config, backbone):
    model = build_model(small_model_config(backbone=backbone), 8, 4, 2)
    spikes = model.backbone(model.encoder(np.random.default_rng(2).normal(size=(3, 8, 2))))

    assert set(np.unique(spikes.values)) <= {0.0, 1.0}


@pytest.mark.parametrize("backbone", BACKBONES)
def test_single_step_reduces_loss(small_model_config, backbone):
    improved = 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = build_model(small_model_config(backbone=backbone, encoder="repeat"), 8, 4, 2, seed=seed)
        x, y = rng.normal(size=(16, 8, 2)), rng.normal(size=(16, 4, 2))
        optimizer = Adam(model, lr=1e-3)

        with Tape():
            before = mse_loss(model(x), y)
        backward(before)
        optimizer.step()
        after = mse_loss(model(x), y)

        improved += after.item() < before.item()
    assert improved >= 4


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("encoder", ["delta", "conv", "repeat"])
def test_every_spiking_layer_emits_binary_spikes(mocker, small_model_config, backbone, encoder):
    forward = SpikingLayer.forward
    outputs = {}

    def record(layer, currents, state=None):
        spikes = forward(layer, currents, state)
        outputs.setdefault(id(layer), []).append(np.unique(spikes.values))
        return spikes

    mocker.patch.object(SpikingLayer, "forward", autospec=True, side_effect=record)
    model = build_model(small_model_config(backbone=backbone, encoder=encoder), 8, 4, 2)
    model(np.random.default_rng(3).normal(size=(3, 8, 2)))

    layers = {id(m) for _, m in model.named_modules() if isinstance(m, SpikingLayer)}
    assert layers and set(outputs) == layers
    for values in outputs.values():
        assert set(np.concatenate(values)) <= {0.0, 1.0}
