import math

import numpy as np
import pytest

from spikets.autodiff import DiffArray, Tape, backward, default_dtype
from spikets.errors import ConfigError, NonFiniteError
from spikets.lif import AlignmentConfig, LifConfig, LifState, lif_step, reset_state, sn_layer, spike, surrogate_grad


def _trace(current, steps, cfg):
    """Scalar float32 reference of the neuron recurrences."""
    h, beta, thr = np.float32(cfg.v_reset), np.float32(cfg.beta), np.float32(cfg.u_thr)
    spikes = []
    for _ in range(steps):
        u = h + np.float32(current)
        s = u >= thr
        h = np.float32(cfg.v_reset) if s else u * beta
        spikes.append(float(s))
    return spikes, float(h)


def test_single_step_fires_and_resets():
    state = LifState()
    s = lif_step(DiffArray([1.2]), state, LifConfig())

    assert s.values.tolist() == [1.0]
    assert state.h.values.tolist() == [0.0]
    assert state.step_count == 1


def test_single_step_below_threshold_decays():
    state = LifState()
    s = lif_step(DiffArray([0.5]), state, LifConfig())

    assert s.values.tolist() == [0.0]
    assert state.h.values[0] == pytest.approx(0.495, abs=1e-6)


def test_two_steps_accumulate():
    cfg = LifConfig()
    state = LifState()

    first = lif_step(DiffArray([0.6]), state, cfg)
    assert first.values[0] == 0.0
    assert state.h.values[0] == pytest.approx(0.594, abs=1e-6)

    second = lif_step(DiffArray([0.6]), state, cfg)
    assert second.values[0] == 1.0
    assert state.h.values[0] == 0.0


def test_decay_is_exact_without_spike():
    cfg = LifConfig(beta=0.9)
    state = LifState()
    lif_step(DiffArray([0.37]), state, cfg)

    assert state.h.values[0] == np.float32(0.37) * np.float32(0.9)


def test_reset_to_nonzero_potential():
    cfg = LifConfig(v_reset=-0.5)
    state = LifState()
    s = lif_step(DiffArray([2.0]), state, cfg)

    assert s.values[0] == 1.0
    assert state.h.values[0] == -0.5


@pytest.mark.parametrize("current", [0.005, 0.3, 0.6, 1.0])
def test_constant_current_matches_reference(current):
    cfg = LifConfig()
    state = LifState()
    out = sn_layer(DiffArray(np.full((10, 1), current)), cfg, state)

    expected, h = _trace(current, 10, cfg)
    np.testing.assert_array_equal(out.values[:, 0], expected)
    assert state.h.values[0] == pytest.approx(h, abs=1e-6)


def test_weak_current_never_fires():
    # stays below u_thr while c < u_thr * (1 - beta)
    out = sn_layer(DiffArray(np.full((200, 3), 0.005)), LifConfig())

    assert out.values.sum() == 0


def test_zero_input_is_silent():
    state = LifState()
    out = sn_layer(DiffArray(np.zeros((5, 2, 3))), LifConfig(), state)

    assert out.values.sum() == 0
    np.testing.assert_array_equal(state.h.values, 0.0)


def test_spikes_are_binary(rng):
    out = sn_layer(DiffArray(rng.normal(0.5, 1.0, size=(8, 4, 5))), LifConfig())

    assert set(np.unique(out.values)) <= {0.0, 1.0}
    assert out.shape == (8, 4, 5)


def test_reset_state_is_idempotent():
    cfg = LifConfig(v_reset=-0.25)
    state = LifState()
    sn_layer(DiffArray(np.full((3, 2), 0.4)), cfg, state)

    reset_state(state, cfg)
    once = state.h.values.copy()
    reset_state(state, cfg)

    np.testing.assert_array_equal(state.h.values, once)
    np.testing.assert_array_equal(once, -0.25)
    assert state.step_count == 0


def test_reset_then_zero_input_is_silent():
    cfg = LifConfig()
    state = LifState()
    sn_layer(DiffArray(np.full((3, 2), 0.9)), cfg, state)
    reset_state(state, cfg)

    assert sn_layer(DiffArray(np.zeros((4, 2))), cfg, state).values.sum() == 0


def test_surrogate_values():
    assert surrogate_grad(0.0, 2.0) == 1.0
    assert surrogate_grad(1.0, 2.0) == pytest.approx(1.0 / (1.0 + math.pi**2))
    assert surrogate_grad(0.7, 2.0) == surrogate_grad(-0.7, 2.0)


def test_surrogate_backward_matches_formula(rng):
    cfg = LifConfig()
    values = rng.uniform(-3.0, 3.0, size=100)
    with default_dtype(np.float64):
        u = DiffArray(values, requires_grad=True)
        with Tape():
            loss = spike(u, cfg).sum()
        backward(loss)

    np.testing.assert_allclose(u.grad, surrogate_grad(values - cfg.u_thr, cfg.alpha), rtol=1e-6, atol=1e-6)


def test_surrogate_uncentered(rng):
    cfg = LifConfig(alpha=3.0, center_at_threshold=False)
    values = rng.uniform(-1.0, 1.0, size=10)
    with default_dtype(np.float64):
        u = DiffArray(values, requires_grad=True)
        with Tape():
            loss = spike(u, cfg).sum()
        backward(loss)

    np.testing.assert_allclose(u.grad, surrogate_grad(values, 3.0), rtol=1e-6)


def test_gradient_flows_below_threshold():
    w = DiffArray([0.9], requires_grad=True)
    with Tape():
        s = lif_step(w * 1.0, LifState(), LifConfig())
        loss = s.sum()
    backward(loss)

    assert s.values[0] == 0.0
    assert w.grad[0] == pytest.approx(surrogate_grad(-0.1, 2.0), rel=1e-5)


def test_non_finite_current():
    with pytest.raises(NonFiniteError):
        lif_step(DiffArray([np.nan]), LifState(), LifConfig())


@pytest.mark.parametrize(
    "kwargs", [{"beta": 0.0}, {"beta": 1.5}, {"alpha": 0.0}, {"u_thr": 0.0, "v_reset": 0.0}, {"v_reset": 2.0}]
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        LifConfig(**kwargs)


def test_alignment():
    assert AlignmentConfig(ts=4, series_len=20, channels=3).spike_events == 240
    with pytest.raises(ConfigError):
        AlignmentConfig(ts=0)
