"""Dense numeric kernels with hand-written reverse-mode passes.

Layout is channels-first ``[N, C, T]`` for every temporal op.  All ops keep
the dtype of their input (float32 in models, float64 in gradient checks);
convolution products are accumulated in float64 and cast back.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError, TemporalExtentError

BN_EPSILON = 1e-5

# active multiply-add counters, see count_macs()
_mac_counters: list[list[int]] = []


@contextmanager
def count_macs():
    """Count convolution multiply-adds executed inside the block: ``with count_macs() as c: ...; c[0]``."""
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_width: int
    dilation: int = 1
    stride: int = 1
    causal: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_width", "dilation", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"Conv1dSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.dilation > 1 and self.stride > 1:
            raise ConfigError("a convolution may be dilated or strided, not both")

    @property
    def span(self) -> int:
        """Number of input frames covered by one output frame."""
        return (self.kernel_width - 1) * self.dilation + 1

    @property
    def alignment(self) -> int:
        """Offset of the input frame an output frame is aligned to.

        Output ``i`` reads inputs ``[i*stride, i*stride + span - 1]``.  A
        centered convolution attributes that output to the middle tap, a
        causal one to the last tap, so it never reads a later frame.
        """
        return self.span - 1 if self.causal else (self.span - 1) // 2

    def output_length(self, t: int) -> int:
        if t < self.span:
            raise TemporalExtentError(
                f"insufficient temporal extent: need at least {self.span} frames, got {t}"
            )
        return (t - self.span) // self.stride + 1


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError(f"batch-norm momentum must be in (0, 1], got {self.momentum}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_conv_shapes(x, weight, bias, spec):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [N, C_in, T], got shape {x.shape}")
    if weight.shape != (spec.out_channels, spec.in_channels, spec.kernel_width):
        raise ShapeError(
            f"weight shape {weight.shape} does not match spec "
            f"(C_out={spec.out_channels}, C_in={spec.in_channels}, W={spec.kernel_width})"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input channel dimension C_in={x.shape[1]}, expected {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape}, expected ({spec.out_channels},)")


def _im2col(x, spec, t_out):
    # -> [N*T_out, W*C_in], tap-major
    xt = np.asarray(x, np.float64).transpose(0, 2, 1)
    step, d = spec.stride, spec.dilation
    stop = step * (t_out - 1) + 1
    taps = [xt[:, k * d:k * d + stop:step, :] for k in range(spec.kernel_width)]
    cols = np.stack(taps, axis=2)
    return cols.reshape(x.shape[0] * t_out, spec.kernel_width * spec.in_channels)


def _weight_matrix(weight):
    c_out, c_in, w = weight.shape
    return np.asarray(weight, np.float64).transpose(0, 2, 1).reshape(c_out, w * c_in)


def conv1d_forward(x, weight, bias, spec: Conv1dSpec, _cols=None):
    """Valid (unpadded) 1D convolution, optionally dilated or strided.

    ``out[n, o, i] = bias[o] + sum_{c,k} weight[o, c, k] * x[n, c, i*stride + k*dilation]``
    """
    _check_conv_shapes(x, weight, bias, spec)
    n, _, t = x.shape
    t_out = spec.output_length(t)
    cols = _im2col(x, spec, t_out) if _cols is None else _cols
    out = cols @ _weight_matrix(weight).T
    for counter in _mac_counters:
        counter[0] += cols.shape[0] * cols.shape[1] * spec.out_channels
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, t_out, spec.out_channels).transpose(0, 2, 1)).astype(
        x.dtype, copy=False
    )


def conv1d_backward(grad_out, x, weight, spec: Conv1dSpec, _cols=None):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv1d_forward`."""
    _check_conv_shapes(x, weight, None, spec)
    n, c_in, t = x.shape
    t_out = spec.output_length(t)
    if grad_out.shape != (n, spec.out_channels, t_out):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, spec.out_channels, t_out)}")
    cols = _im2col(x, spec, t_out) if _cols is None else _cols
    g = np.asarray(grad_out, np.float64).transpose(0, 2, 1).reshape(n * t_out, spec.out_channels)

    w = spec.kernel_width
    grad_w = (g.T @ cols).reshape(spec.out_channels, w, c_in).transpose(0, 2, 1)
    grad_b = g.sum(axis=0)

    gcols = (g @ _weight_matrix(weight)).reshape(n, t_out, w, c_in)
    gx = np.zeros((n, t, c_in))
    stop = spec.stride * (t_out - 1) + 1
    for k in range(w):
        start = k * spec.dilation
        gx[:, start:start + stop:spec.stride, :] += gcols[:, :, k, :]
    dt = x.dtype
    return (
        np.ascontiguousarray(gx.transpose(0, 2, 1)).astype(dt, copy=False),
        np.ascontiguousarray(grad_w).astype(weight.dtype, copy=False),
        grad_b.astype(weight.dtype, copy=False),
    )


def batchnorm_forward(x, state: BatchNormState, training: bool):
    """Per-channel normalization over the ``N x T`` sample axis.

    In training mode the running statistics are updated in place as
    ``(1 - momentum) * old + momentum * batch`` with the unbiased batch
    variance; the output itself always uses the biased variance.
    """
    if x.ndim != 3 or x.shape[1] != state.channels:
        raise ShapeError(f"batch-norm input {x.shape} does not have {state.channels} channels")
    g = state.gamma[None, :, None]
    b = state.beta[None, :, None]
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        return ((x - state.running_mean[None, :, None]) * inv[None, :, None] * g + b).astype(x.dtype)

    count = x.shape[0] * x.shape[2]
    if count < 2:
        raise DegenerateBatchError("degenerate batch: N*T == 1, batch variance is undefined")
    mean = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var * (count / (count - 1))
    xhat = (x - mean[None, :, None]) / np.sqrt(var + state.epsilon)[None, :, None]
    return (xhat * g + b).astype(x.dtype)


def batchnorm_backward(grad_out, x, state: BatchNormState, training: bool = True):
    """Return ``(grad_input, grad_gamma, grad_beta)``; batch statistics are recomputed from ``x``."""
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x - state.running_mean[None, :, None]) * inv[None, :, None]
        gx = grad_out * (state.gamma * inv)[None, :, None]
        return gx.astype(x.dtype), (grad_out * xhat).sum(axis=(0, 2)), grad_out.sum(axis=(0, 2))

    count = x.shape[0] * x.shape[2]
    mean = x.mean(axis=(0, 2))
    inv = 1.0 / np.sqrt(x.var(axis=(0, 2)) + state.epsilon)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    dxhat = grad_out * state.gamma[None, :, None]
    gx = (inv / count)[None, :, None] * (
        count * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return gx.astype(x.dtype), grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _check_p(p):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")


def dropout_forward(x, p: float, rng: np.random.Generator | None, training: bool = True):
    """Inverted dropout.  Returns ``(output, mask)``; ``mask`` is None when inactive."""
    _check_p(p)
    if not training or p == 0.0:
        return x, None
    mask = rng.random(x.shape, dtype=np.float32) >= p
    return x * mask * np.asarray(1.0 / (1.0 - p), x.dtype), mask


def dropout_backward(grad_out, mask, p: float):
    _check_p(p)
    if mask is None:
        return grad_out
    return grad_out * mask * np.asarray(1.0 / (1.0 - p), grad_out.dtype)


@dataclass
class Parameter:
    """A trainable array with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0
