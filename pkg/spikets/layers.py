"""Trainable building blocks and the parameter registry shared by every model.

A `Module` registers `Parameter`s and sub-modules assigned as attributes, and numpy buffers registered with
`register_buffer`. Names are dotted paths (`backbone.blocks.0.conv.weight`) used by checkpoints and by the
activity probe.
"""

import logging
from typing import Iterator, Optional

import numpy as np

from spikets import autodiff as ad
from spikets.autodiff import DiffArray
from spikets.errors import CheckpointError, ShapeError
from spikets.lif import LifConfig, LifState, sn_layer
from spikets.probe import record_activity

logger = logging.getLogger(__name__)


class Parameter(DiffArray):
    """A DiffArray that always requires gradients and is registered by its owning Module."""

    def __init__(self, values):
        super().__init__(values, requires_grad=True)


class Module:
    """Base class of layers and models."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, values: np.ndarray):
        """Register a non-trainable array (e.g. running statistics) that is saved in checkpoints."""
        values = np.asarray(values, dtype=ad.get_default_dtype()).copy()
        self._buffers[name] = values
        object.__setattr__(self, name, values)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} does not implement forward")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for module_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                yield (f"{module_name}.{name}" if module_name else name), param

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for module_name, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{module_name}.{name}" if module_name else name), buf

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict:
        """dict: Copies of every parameter and buffer, keyed by dotted name."""
        state = {name: p.values.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict):
        """Copy arrays into the registered parameters and buffers.

        Raises:
            CheckpointError: If names are missing or unexpected, or a shape differs.
        """
        targets = {name: p.values for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing {missing}, unexpected {unexpected}")
        for name, target in targets.items():
            values = np.asarray(state[name])
            if values.shape != target.shape:
                raise CheckpointError(f"Shape mismatch for '{name}': expected {target.shape}, got {values.shape}")
            target[...] = values


class ModuleList(Module):
    """Ordered container of sub-modules, registered as "0", "1", ..."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for module in modules:
            self.append(module)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Affine(Module):
    """y = x W + b on the last axis.

    Args:
        d_in (int): Input features.
        d_out (int): Output features.
        rng (np.random.Generator): Source of the initial weights.
        bias (bool): Whether to learn a bias.
        float_input (bool): The layer consumes float activations (billed as MACs by the energy model).
        macs_scale (int): Multiplier applied to the reported MAC count, for currents re-integrated over several
            SNN sub-steps.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        bias: bool = True,
        float_input: bool = False,
        macs_scale: int = 1,
    ):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.float_input, self.macs_scale = float_input, macs_scale
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(_uniform(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: DiffArray) -> DiffArray:
        record_activity(self, [x], x.size * self.d_out * self.macs_scale, self.float_input)
        return ad.affine(x, self.weight, self.bias)


class CausalConv1d(Module):
    """Causal dilated convolution over the last axis of (..., C_in, T) inputs."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        rng: np.random.Generator,
        dilation: int = 1,
        bias: bool = True,
        float_input: bool = False,
    ):
        super().__init__()
        if min(c_in, c_out, kernel_size, dilation) < 1:
            raise ShapeError("CausalConv1d dimensions and dilation must be positive")
        self.c_in, self.c_out, self.kernel_size, self.dilation = c_in, c_out, kernel_size, dilation
        self.float_input = float_input
        fan_in = c_in * kernel_size
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel_size), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in)) if bias else None

    def forward(self, x: DiffArray) -> DiffArray:
        macs = (x.size // self.c_in) * self.c_out * self.c_in * self.kernel_size
        record_activity(self, [x], macs, self.float_input)
        return ad.conv1d_causal(x, self.weight, dilation=self.dilation, bias=self.bias)


class BatchNorm(Module):
    """Batch normalization over every axis except `feature_axis`, with running statistics for evaluation."""

    def __init__(self, num_features: int, feature_axis: int = -1, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.feature_axis, self.eps, self.momentum = feature_axis, eps, momentum
        self.gamma = Parameter(np.ones(num_features))
        self.beta = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def forward(self, x: DiffArray) -> DiffArray:
        return ad.batchnorm(
            x,
            self.gamma,
            self.beta,
            feature_axis=self.feature_axis,
            eps=self.eps,
            training=self.training,
            running_mean=self.running_mean,
            running_var=self.running_var,
            momentum=self.momentum,
        )


class SpikingLayer(Module):
    """LIF spiking layer over the leading time axis. A fresh state is used per call unless one is passed."""

    def __init__(self, cfg: LifConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, currents: DiffArray, state: Optional[LifState] = None) -> DiffArray:
        return sn_layer(currents, self.cfg, state)


class MatMulLayer(Module):
    """Product of two activations over their last two axes, e.g. binary Q and K^T in spiking attention."""

    def forward(self, a: DiffArray, b: DiffArray) -> DiffArray:
        macs = int(np.prod(a.shape)) * b.shape[-1]
        record_activity(self, [b], macs, float_input=False)
        return ad.matmul(a, b)
