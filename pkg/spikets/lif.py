"""Leaky integrate-and-fire neurons with a surrogate-gradient spike nonlinearity.

Per SNN sub-step, for input current I and temporal output H carried from the previous sub-step:

    U  = H_prev + I
    S  = 1 if U >= u_thr else 0
    H' = v_reset * S + (1 - S) * beta * U

The reverse pass through S uses the arctangent surrogate derivative
(alpha / 2) / (1 + (pi / 2 * alpha * u)^2), evaluated at u = U - u_thr unless `center_at_threshold` is off.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from spikets.autodiff import DiffArray, as_diff_array, custom_grad, stack
from spikets.errors import ConfigError, NonFiniteError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LifConfig:
    """Parameters shared by every neuron of a spiking layer.

    Args:
        u_thr (float): Membrane threshold.
        beta (float): Decay rate, in (0, 1].
        v_reset (float): Reset potential, also the initial temporal output.
        alpha (float): Surrogate gradient frequency, > 0.
        center_at_threshold (bool): Evaluate the surrogate derivative at U - u_thr rather than at U.
    """

    u_thr: float = 1.0
    beta: float = 0.99
    v_reset: float = 0.0
    alpha: float = 2.0
    center_at_threshold: bool = True

    def __post_init__(self):
        if not self.u_thr > self.v_reset:
            raise ConfigError(f"u_thr ({self.u_thr}) must be greater than v_reset ({self.v_reset})")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if not self.alpha > 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


@dataclass
class LifState:
    """Temporal output H of a group of neurons, carried between SNN sub-steps.

    `h` is None until the first step, when it is initialized to v_reset with the shape of the input current.
    """

    h: Optional[DiffArray] = None
    step_count: int = 0


@dataclass(frozen=True)
class AlignmentConfig:
    """Temporal alignment: every series step is simulated as `ts` SNN sub-steps."""

    ts: int = 4
    series_len: int = 1
    channels: int = 1

    def __post_init__(self):
        if self.ts < 1:
            raise ConfigError(f"ts must be >= 1, got {self.ts}")

    @property
    def spike_events(self) -> int:
        """int: Number of possible spike events of one encoded window (Ts x T x C)."""
        return self.ts * self.series_len * self.channels


def surrogate_grad(u, alpha: float):
    """Arctangent surrogate of dS/dU: (alpha / 2) / (1 + (pi / 2 * alpha * u)^2)."""
    return (alpha / 2.0) / (1.0 + (math.pi / 2.0 * alpha * np.asarray(u)) ** 2)


def _spike_forward(u, u_thr, alpha, centered):
    return (u >= u.dtype.type(u_thr)).astype(u.dtype)


def _spike_backward(ctx, grad):
    (u,) = ctx.inputs
    arg = u - ctx.params["u_thr"] if ctx.params["centered"] else u
    return grad * surrogate_grad(arg, ctx.params["alpha"]).astype(grad.dtype)


spike_fn = custom_grad(_spike_forward, _spike_backward, name="HeavisideSpike")


def spike(u: DiffArray, cfg: LifConfig) -> DiffArray:
    """Heaviside spike of the membrane potential with the surrogate reverse pass."""
    return spike_fn(u, u_thr=cfg.u_thr, alpha=cfg.alpha, centered=cfg.center_at_threshold)


def lif_step(i_t: DiffArray, state: LifState, cfg: LifConfig) -> DiffArray:
    """Advance a group of neurons by one SNN sub-step.

    Args:
        i_t (DiffArray): Input current.
        state (LifState): Temporal output of the previous sub-step. Updated in place.
        cfg (LifConfig): Neuron parameters.

    Returns:
        DiffArray: Binary spikes, same shape as the current.
    """
    i_t = as_diff_array(i_t)
    if not np.all(np.isfinite(i_t.values)):
        raise NonFiniteError("lif_step received a non-finite input current")
    if state.h is None or state.h.shape != i_t.shape:
        state.h = DiffArray(np.full(i_t.shape, cfg.v_reset))

    u = state.h + i_t
    s = spike(u, cfg)
    h = (1.0 - s) * (u * cfg.beta)
    if cfg.v_reset != 0.0:
        h = h + DiffArray(cfg.v_reset * s.values)
    state.h = h
    state.step_count += 1
    return s


def sn_layer(currents: DiffArray, cfg: LifConfig, state: Optional[LifState] = None) -> DiffArray:
    """Run a spiking layer over the leading (time) axis of `currents`.

    Args:
        currents (DiffArray): Currents of shape (T', ...).
        cfg (LifConfig): Neuron parameters.
        state (LifState): Optional state to continue from; a fresh one is used otherwise. Left holding the final
            step.

    Returns:
        DiffArray: Spike train of shape (T', ...).
    """
    currents = as_diff_array(currents)
    if currents.ndim < 1 or currents.shape[0] < 1:
        raise ValueError("sn_layer needs at least one time step")
    if state is None:
        state = LifState()
    spikes = [lif_step(currents[t], state, cfg) for t in range(currents.shape[0])]
    return stack(spikes, axis=0)


def reset_state(state: LifState, cfg: LifConfig) -> LifState:
    """Set the temporal output back to v_reset everywhere and zero the step counter."""
    if state.h is not None:
        state.h = DiffArray(np.full(state.h.shape, cfg.v_reset))
    state.step_count = 0
    return state
