"""Per-layer activity recording used by the energy model.

Layers report every forward call to the active `ActivityProbe` (if any): the multiply-accumulate count of the call
and the arrays entering the layer. The probe accumulates, per named layer, the MAC total and the number of
nonzero and total input entries, from which firing rates are derived.
"""

import contextvars
from dataclasses import dataclass
from typing import Optional

import numpy as np

_ACTIVE_PROBE = contextvars.ContextVar("spikets_active_probe", default=None)


@dataclass
class LayerActivity:
    macs: int = 0
    ones: int = 0
    entries: int = 0
    float_input: bool = False
    calls: int = 0

    @property
    def firing_rate(self) -> float:
        """float: Fraction of nonzero entries among the layer inputs seen so far."""
        return self.ones / self.entries if self.entries else 0.0


class ActivityProbe:
    """Context manager collecting `LayerActivity` for the named layers of a model.

    Args:
        model: Root module; its `named_modules` provide the layer names.
    """

    def __init__(self, model):
        self.names = {id(module): name or type(module).__name__ for name, module in model.named_modules()}
        self.layers: dict = {}
        self._token = None

    def __enter__(self) -> "ActivityProbe":
        self._token = _ACTIVE_PROBE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_PROBE.reset(self._token)
        self._token = None
        return False

    def record(self, module, inputs, macs: int, float_input: bool):
        name = self.names.get(id(module))
        if name is None:
            return
        activity = self.layers.setdefault(name, LayerActivity(float_input=float_input))
        activity.macs += int(macs)
        activity.calls += 1
        for values in inputs:
            activity.ones += int(np.count_nonzero(values))
            activity.entries += int(values.size)


def active_probe() -> Optional[ActivityProbe]:
    return _ACTIVE_PROBE.get()


def record_activity(module, inputs, macs: int, float_input: bool = False):
    """Report one layer call to the active probe, if there is one."""
    probe = _ACTIVE_PROBE.get()
    if probe is not None:
        probe.record(module, [np.asarray(getattr(x, "values", x)) for x in inputs], macs, float_input)
