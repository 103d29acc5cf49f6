"""Minimal dense-array engine with reverse-mode automatic differentiation.

Values are stored in numpy arrays (float32 unless a different default dtype is selected with `default_dtype`).
Every differentiable operation is a `Function` subclass with a `forward` and a `backward` method. While a `Tape`
is active, applying a function to inputs that require gradients records a node on the tape; `backward` then walks
the tape in reverse order, visiting each node exactly once, and accumulates gradients into the leaves.

Typical usage:

    with Tape():
        loss = mse_loss(model(x), y)
    backward(loss)

Outside of a tape nothing is recorded, which is what evaluation code relies on.

Gradients of leaves accumulate across backward passes until they are explicitly zeroed (`DiffArray.zero_grad`),
the trainer does that between optimizer steps.
"""

import contextlib
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from spikets.errors import BackwardError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = contextvars.ContextVar("spikets_default_dtype", default=np.float32)
_ACTIVE_TAPE = contextvars.ContextVar("spikets_active_tape", default=None)


def get_default_dtype() -> type:
    """type: The numpy dtype used for new arrays."""
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype: type):
    """Temporarily change the dtype used by new DiffArrays (e.g. float64 for gradient checks)."""
    token = _DEFAULT_DTYPE.set(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


class DiffArray:
    """Dense N-dimensional array taking part in reverse-mode differentiation.

    Args:
        values: Array-like data. Converted to the default dtype.
        requires_grad (bool): Whether gradients should be accumulated into this array.
    """

    def __init__(self, values: Any, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        """tuple: Shape of the array."""
        return self.values.shape

    @property
    def ndim(self) -> int:
        """int: Number of dimensions."""
        return self.values.ndim

    @property
    def size(self) -> int:
        """int: Number of elements."""
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        """bool: True if this array was not produced by a recorded operation."""
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def detach(self) -> "DiffArray":
        """Return a new array sharing the values but not attached to any tape."""
        return DiffArray(self.values, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, DiffArray):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffArray):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other):
        return AddScalar.apply(MulScalar.apply(self, value=-1.0), value=float(other))

    def __mul__(self, other):
        if isinstance(other, DiffArray):
            return Mul.apply(self, other)
        return MulScalar.apply(self, value=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return MulScalar.apply(self, value=-1.0)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffArray":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffArray":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "DiffArray":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "DiffArray":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)


def as_diff_array(value: Union[DiffArray, np.ndarray, float, Sequence]) -> DiffArray:
    """Wrap plain values in a constant DiffArray. DiffArrays are returned unchanged."""
    if isinstance(value, DiffArray):
        return value
    return DiffArray(value, requires_grad=False)


@dataclass
class Node:
    """One recorded operation: the function instance (holding its forward context), inputs and output."""

    fn: "Function"
    inputs: tuple
    output: DiffArray


@dataclass
class Tape:
    """Ordered record of the operations executed while the tape is active.

    Nodes are appended as operations run, so inputs always precede the nodes that consume them. A tape is owned by
    a single training context and is consumed by `backward`.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False
    _token: Any = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise BackwardError("Tape has already been consumed by a backward pass")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)
        node.output._node = node
        node.output._tape = self

    def backward(self, loss: DiffArray):
        """Propagate gradients from `loss` to every leaf that requires them, then consume the tape.

        Args:
            loss (DiffArray): Scalar produced by an operation recorded on this tape.
        """
        if self.consumed:
            raise BackwardError("Tape has already been consumed by a backward pass")

        grads = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            grad_inputs = node.fn.backward(grad_out)
            if not isinstance(grad_inputs, tuple):
                grad_inputs = (grad_inputs,)
            for inp, grad in zip(node.inputs, grad_inputs):
                if grad is None or not inp.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=inp.values.dtype)
                if grad.shape != inp.shape:
                    raise ShapeError(
                        f"{type(node.fn).__name__} produced a gradient of shape {grad.shape} for an input of "
                        f"shape {inp.shape}"
                    )
                if inp.is_leaf:
                    inp.grad = grad.copy() if inp.grad is None else inp.grad + grad
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + grad
                else:
                    grads[id(inp)] = grad

        for node in self.nodes:
            node.output._node = None
            node.output._tape = None
        self.nodes.clear()
        self.consumed = True


def active_tape() -> Optional[Tape]:
    """Optional[Tape]: The tape recording operations in the current context, if any."""
    return _ACTIVE_TAPE.get()


def backward(loss: DiffArray):
    """Run the reverse pass from a scalar loss.

    Args:
        loss (DiffArray): Scalar loss recorded on an active tape.

    Raises:
        BackwardError: If the loss is not a scalar or is not attached to a tape.
    """
    if loss.size != 1:
        raise BackwardError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise BackwardError("Loss is detached: it was not computed under an active Tape with trainable inputs")
    loss._tape.backward(loss)


class Function:
    """Base class of differentiable operations.

    Subclasses implement `forward`, receiving numpy arrays and keyword parameters, and `backward`, receiving the
    gradient with respect to the output and returning one gradient per input (or None for inputs that do not
    need one). Anything needed by `backward` is stored on the instance during `forward`.
    """

    def forward(self, *values: np.ndarray, **params) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not implement forward")

    def backward(self, grad: np.ndarray):
        raise NotImplementedError(f"{type(self).__name__} does not implement backward")

    @classmethod
    def apply(cls, *inputs: DiffArray, **params) -> DiffArray:
        fn = cls()
        inputs = tuple(as_diff_array(x) for x in inputs)
        out_values = fn.forward(*(x.values for x in inputs), **params)
        if not np.all(np.isfinite(out_values)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")

        tape = _ACTIVE_TAPE.get()
        requires_grad = tape is not None and any(x.requires_grad for x in inputs)
        out = DiffArray(out_values, requires_grad=requires_grad)
        if requires_grad:
            tape.record(Node(fn, inputs, out))
        return out


def _check_same_shape(name: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


class Add(Function):
    def forward(self, a, b):
        _check_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        _check_same_shape("sub", a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        _check_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class AddScalar(Function):
    def forward(self, a, value: float):
        return a + a.dtype.type(value)

    def backward(self, grad):
        return grad


class MulScalar(Function):
    def forward(self, a, value: float):
        self.value = a.dtype.type(value)
        return a * self.value

    def backward(self, grad):
        return grad * self.value


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return grad * 2 * self.a


class MatMul(Function):
    """Matrix product over the last two axes. Leading (batch) axes must be identical; no broadcasting."""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: expected at least 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        return np.matmul(grad, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), grad)


class Affine(Function):
    """y = x W + b on the last axis of x."""

    def forward(self, x, w, b=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"affine: input {x.shape} does not match weights {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} does not match weights {w.shape}")
        self.x, self.w, self.has_bias = x, w, b is not None
        y = np.matmul(x, w)
        return y + b if b is not None else y

    def backward(self, grad):
        x2 = self.x.reshape(-1, self.x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        dx = np.matmul(grad, self.w.T)
        dw = np.matmul(x2.T, g2)
        db = g2.sum(axis=0) if self.has_bias else None
        return dx, dw, db


class CausalConv1d(Function):
    """Left-padded dilated convolution over the last axis.

    x has shape (..., C_in, T), kernels (C_out, C_in, k). Output (..., C_out, T); position t only sees inputs at
    positions <= t. Tap j of the kernel multiplies the input at t - (k - 1 - j) * dilation.
    """

    def forward(self, x, kernels, bias=None, dilation: int = 1):
        if kernels.ndim != 3 or x.ndim < 2 or x.shape[-2] != kernels.shape[1]:
            raise ShapeError(f"conv1d_causal: input {x.shape} does not match kernels {kernels.shape}")
        if min(kernels.shape) < 1 or x.shape[-1] < 1 or dilation < 1:
            raise ShapeError("conv1d_causal: dimensions and dilation must be positive")
        c_out, c_in, k = kernels.shape
        steps = x.shape[-1]
        pad = (k - 1) * dilation
        lead = x.shape[:-2]

        xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, 0)])
        cols = np.stack([xp[..., j * dilation : j * dilation + steps] for j in range(k)], axis=-2)
        cols = cols.reshape(*lead, c_in * k, steps)
        w2 = kernels.reshape(c_out, c_in * k)

        self.cols, self.w2, self.kernels_shape = cols, w2, kernels.shape
        self.x_shape, self.pad, self.dilation, self.has_bias = x.shape, pad, dilation, bias is not None

        out = np.matmul(w2, cols)
        if bias is not None:
            out = out + bias[:, None]
        return out

    def backward(self, grad):
        c_out, c_in, k = self.kernels_shape
        steps = self.x_shape[-1]
        lead = self.x_shape[:-2]

        g2 = grad.reshape(-1, c_out, steps)
        cols2 = self.cols.reshape(-1, c_in * k, steps)
        dkernels = np.tensordot(g2, cols2, axes=([0, 2], [0, 2])).reshape(self.kernels_shape)
        dbias = g2.sum(axis=(0, 2)) if self.has_bias else None

        dcols = np.matmul(self.w2.T, grad).reshape(*lead, c_in, k, steps)
        dxp = np.zeros(lead + (c_in, steps + self.pad), dtype=grad.dtype)
        for j in range(k):
            dxp[..., j * self.dilation : j * self.dilation + steps] += dcols[..., j, :]
        return dxp[..., self.pad :], dkernels, dbias


class BatchNorm(Function):
    """Batch normalization over every axis except `feature_axis`.

    In training mode the batch statistics are used and the running statistics (numpy arrays owned by the caller)
    are updated in place. In evaluation mode the running statistics are used.
    """

    def forward(
        self,
        x,
        gamma,
        beta,
        feature_axis: int = -1,
        eps: float = 1e-5,
        training: bool = True,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        momentum: float = 0.1,
    ):
        axis = feature_axis % x.ndim
        if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
            raise ShapeError(f"batchnorm: parameters {gamma.shape} do not match {x.shape[axis]} features")
        axes = tuple(i for i in range(x.ndim) if i != axis)
        bshape = [1] * x.ndim
        bshape[axis] = x.shape[axis]
        self.axes, self.bshape, self.training = axes, bshape, training
        self.gamma = gamma.reshape(bshape)

        if training:
            n = x.size // x.shape[axis]
            if n < 2:
                raise ShapeError("batchnorm: training mode needs at least 2 values per feature")
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            if running_mean is not None:
                running_mean *= 1 - momentum
                running_mean += momentum * mean.reshape(-1)
            if running_var is not None:
                running_var *= 1 - momentum
                running_var += momentum * var.reshape(-1) * n / (n - 1)
            self.n = n
        else:
            mean = running_mean.reshape(bshape).astype(x.dtype)
            var = running_var.reshape(bshape).astype(x.dtype)

        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = (x - mean) * self.inv_std
        return self.xhat * self.gamma + beta.reshape(bshape)

    def backward(self, grad):
        dgamma = (grad * self.xhat).sum(axis=self.axes)
        dbeta = grad.sum(axis=self.axes)
        dxhat = grad * self.gamma
        if self.training:
            sum_dxhat = dxhat.sum(axis=self.axes, keepdims=True)
            sum_dxhat_xhat = (dxhat * self.xhat).sum(axis=self.axes, keepdims=True)
            dx = self.inv_std / self.n * (self.n * dxhat - sum_dxhat - self.xhat * sum_dxhat_xhat)
        else:
            dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1) if not keepdims else a.size // out.size
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad / self.count, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, a, idx):
        self.shape, self.idx = a.shape, idx
        return np.array(a[idx])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.idx, grad)
        return out


class Concat(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product of the last two axes (leading axes must match exactly)."""
    return MatMul.apply(a, b)


def affine(x: DiffArray, w: DiffArray, b: Optional[DiffArray] = None) -> DiffArray:
    """y = x W + b on the last axis."""
    return Affine.apply(x, w, b) if b is not None else Affine.apply(x, w)


def conv1d_causal(
    x: DiffArray, kernels: DiffArray, dilation: int = 1, bias: Optional[DiffArray] = None
) -> DiffArray:
    """Causal dilated convolution of x (..., C_in, T) with kernels (C_out, C_in, k); output length is T."""
    if bias is None:
        return CausalConv1d.apply(x, kernels, dilation=dilation)
    return CausalConv1d.apply(x, kernels, bias, dilation=dilation)


def batchnorm(
    x: DiffArray,
    gamma: DiffArray,
    beta: DiffArray,
    feature_axis: int = -1,
    eps: float = 1e-5,
    training: bool = True,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    momentum: float = 0.1,
) -> DiffArray:
    """Batch normalization; see `BatchNorm`."""
    if not training and (running_mean is None or running_var is None):
        raise ShapeError("batchnorm: evaluation mode needs running statistics")
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        feature_axis=feature_axis,
        eps=eps,
        training=training,
        running_mean=running_mean,
        running_var=running_var,
        momentum=momentum,
    )


def square(x: DiffArray) -> DiffArray:
    return Square.apply(x)


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    return Concat.apply(*arrays, axis=axis)


def stack(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    return Stack.apply(*arrays, axis=axis)


def swapaxes(x: DiffArray, a: int, b: int) -> DiffArray:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return Transpose.apply(x, axes=tuple(axes))


@dataclass
class Context:
    """Forward context handed to custom backward functions."""

    inputs: tuple
    output: np.ndarray
    params: dict


def custom_grad(
    forward_fn: Callable[..., np.ndarray], backward_fn: Callable[[Context, np.ndarray], Any], name: str = "Custom"
) -> Callable[..., DiffArray]:
    """Register an operation whose reverse pass is decoupled from its forward pass.

    Args:
        forward_fn (Callable): Receives the input arrays and keyword parameters, returns the output array. Used
            as-is in the forward pass.
        backward_fn (Callable): Receives the saved `Context` and the output gradient, returns the input gradient
            (or a tuple of them, one per input).
        name (str): Name of the generated Function subclass.

    Returns:
        Callable: The operation, taking DiffArrays and keyword parameters.
    """

    def _forward(self, *values, **params):
        out = np.asarray(forward_fn(*values, **params))
        self.ctx = Context(inputs=values, output=out, params=params)
        return out

    def _backward(self, grad):
        result = backward_fn(self.ctx, grad)
        return result if isinstance(result, tuple) else (result,)

    fn_cls = type(name, (Function,), {"forward": _forward, "backward": _backward})

    def op(*inputs, **params) -> DiffArray:
        return fn_cls.apply(*inputs, **params)

    op.function = fn_cls
    return op


def gradcheck(
    fn: Callable[..., DiffArray],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> bool:
    """Compare analytic gradients of sum(fn(*inputs)) with central finite differences.

    The check runs in float64.

    Args:
        fn (Callable): Function of DiffArrays returning a DiffArray.
        inputs (Sequence[np.ndarray]): Points at which to check the gradient.
        eps (float): Finite-difference step.
        rtol (float): Relative tolerance.
        atol (float): Absolute tolerance, used near zero.

    Returns:
        bool: True if every gradient entry agrees.
    """
    with default_dtype(np.float64):
        args = [DiffArray(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        with Tape():
            out = fn(*args).sum()
        backward(out)
        analytic = [a.grad if a.grad is not None else np.zeros_like(a.values) for a in args]

        for arg, grad in zip(args, analytic):
            numeric = np.zeros_like(arg.values)
            flat = arg.values.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = fn(*[DiffArray(a.values) for a in args]).values.sum()
                flat[i] = orig - eps
                minus = fn(*[DiffArray(a.values) for a in args]).values.sum()
                flat[i] = orig
                numeric.reshape(-1)[i] = (plus - minus) / (2 * eps)
            if not np.allclose(grad, numeric, rtol=rtol, atol=atol):
                logger.debug("gradcheck mismatch: analytic %s, numeric %s", grad, numeric)
                return False
    return True
