"""Temporal dilated convolutional pose model.

Layer plumbing for ``B`` blocks and kernel width ``W``::

    2J --conv(W)--> C --[conv(W, dilation W^b) -> conv(1)] x B--> C --conv(1)--> 3J

Every convolution but the last is followed by batch norm, ReLU and dropout.
Convolutions feeding batch norm carry no bias (it would be cancelled by the
normalization); the output convolution has one.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, TemporalExtentError
from .numerics import (
    BatchNormState,
    Conv1dSpec,
    Parameter,
    _im2col,
    batchnorm_backward,
    batchnorm_forward,
    conv1d_backward,
    conv1d_forward,
    dropout_backward,
    dropout_forward,
    relu_backward,
    relu_forward,
)


@dataclass(frozen=True)
class ModelConfig:
    num_joints: int = 17
    in_dims: int = 2
    out_dims: int = 3
    blocks: int = 2
    kernel_width: int = 3
    channels: int = 1024
    dropout_p: float = 0.25
    causal: bool = False
    dense_mode: bool = False
    # None -> same as num_joints; the trajectory network regresses a single joint
    num_joints_out: int | None = None

    def __post_init__(self):
        if self.num_joints < 1 or self.channels < 1:
            raise ConfigError("num_joints and channels must be >= 1")
        if self.blocks < 0:
            raise ConfigError(f"blocks must be >= 0, got {self.blocks}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel_width must be odd and >= 1, got {self.kernel_width}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_joints_out is not None and self.num_joints_out < 1:
            raise ConfigError("num_joints_out must be >= 1")

    @property
    def joints_out(self) -> int:
        return self.num_joints if self.num_joints_out is None else self.num_joints_out

    def dilation(self, block: int) -> int:
        return self.kernel_width ** (block + 1)

    @property
    def receptive_field(self) -> int:
        w = self.kernel_width
        return 1 + (w - 1) * sum(w ** b for b in range(self.blocks + 1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class _ConvUnit:
    """conv -> batch norm -> ReLU -> dropout, caching what backward needs."""

    def __init__(self, name, weight, bn: BatchNormState, dropout_p):
        self.weight = Parameter(f"{name}.weight", weight)
        self.bn = bn
        self.gamma = Parameter(f"{name}.bn.gamma", bn.gamma)
        self.beta = Parameter(f"{name}.bn.beta", bn.beta)
        self.p = dropout_p
        self._cache = None

    def forward(self, x, spec, training, rng, record):
        cols = _im2col(x, spec, spec.output_length(x.shape[2]))
        h = conv1d_forward(x, self.weight.value, None, spec, _cols=cols)
        z = batchnorm_forward(h, self.bn, training)
        out, mask = dropout_forward(relu_forward(z), self.p, rng, training)
        self._cache = (x, spec, cols, h, z, mask, training) if record else None
        return out

    def backward(self, g):
        x, spec, cols, h, z, mask, training = self._cache
        g = relu_backward(dropout_backward(g, mask, self.p), z)
        g, dgamma, dbeta = batchnorm_backward(g, h, self.bn, training)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        gx, gw, _ = conv1d_backward(g, x, self.weight.value, spec, _cols=cols)
        self.weight.grad += gw
        return gx


class TemporalModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        rng = np.random.default_rng(seed)
        c, w = cfg.channels, cfg.kernel_width

        def init(c_out, c_in, width):
            bound = 1.0 / np.sqrt(c_in * width)
            return rng.uniform(-bound, bound, size=(c_out, c_in, width)).astype(np.float32)

        def bn():
            return BatchNormState.fresh(c)

        self.expand = _ConvUnit("expand", init(c, cfg.num_joints * cfg.in_dims, w), bn(), cfg.dropout_p)
        self.blocks = []
        for b in range(cfg.blocks):
            wide_w = w if not cfg.dense_mode else (w - 1) * cfg.dilation(b) + 1
            wide = _ConvUnit(f"blocks.{b}.wide", init(c, c, wide_w), bn(), cfg.dropout_p)
            narrow = _ConvUnit(f"blocks.{b}.narrow", init(c, c, 1), bn(), cfg.dropout_p)
            self.blocks.append((wide, narrow))
        n_out = cfg.joints_out * cfg.out_dims
        self.shrink_w = Parameter("shrink.weight", init(n_out, c, 1))
        bound = 1.0 / np.sqrt(c)
        self.shrink_b = Parameter("shrink.bias", rng.uniform(-bound, bound, n_out).astype(np.float32))
        self._tape = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def receptive_field(self) -> int:
        return self.config.receptive_field

    def _units(self):
        yield self.expand
        for wide, narrow in self.blocks:
            yield wide
            yield narrow

    def parameters(self) -> list[Parameter]:
        params = []
        for u in self._units():
            params += [u.weight, u.gamma, u.beta]
        return params + [self.shrink_w, self.shrink_b]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_bn_momentum(self, momentum: float):
        for u in self._units():
            u.bn.momentum = momentum

    def astype(self, dtype) -> "TemporalModel":
        """Convert every array in place (float64 copies are handy for gradient checks)."""
        for u in self._units():
            bn = u.bn
            bn.gamma, bn.beta = bn.gamma.astype(dtype), bn.beta.astype(dtype)
            bn.running_mean, bn.running_var = bn.running_mean.astype(dtype), bn.running_var.astype(dtype)
            u.gamma.value, u.beta.value = bn.gamma, bn.beta
            u.weight.value = u.weight.value.astype(dtype)
        self.shrink_w.value = self.shrink_w.value.astype(dtype)
        self.shrink_b.value = self.shrink_b.value.astype(dtype)
        for p in self.parameters():
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        """Trainable arrays followed by batch-norm running statistics, in a fixed order."""
        state = {p.name: p.value for p in self.parameters()}
        for u in self._units():
            prefix = u.weight.name.rsplit(".", 1)[0]
            state[f"{prefix}.bn.running_mean"] = u.bn.running_mean
            state[f"{prefix}.bn.running_var"] = u.bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in own.items():
            if state[name].shape != arr.shape:
                raise ShapeError(f"parameter {name}: shape {state[name].shape}, expected {arr.shape}")
            arr[...] = state[name]

    # -- layer specs -------------------------------------------------------

    def _specs(self, strided: bool):
        cfg = self.config
        c, w = cfg.channels, cfg.kernel_width
        j_in = cfg.num_joints * cfg.in_dims
        if strided:
            expand = Conv1dSpec(j_in, c, w, stride=w, causal=cfg.causal)
        else:
            expand = Conv1dSpec(j_in, c, w, causal=cfg.causal)
        blocks = []
        for b in range(cfg.blocks):
            if strided:
                wide = Conv1dSpec(c, c, w, stride=w, causal=cfg.causal)
            elif cfg.dense_mode:
                wide = Conv1dSpec(c, c, (w - 1) * cfg.dilation(b) + 1, causal=cfg.causal)
            else:
                wide = Conv1dSpec(c, c, w, dilation=cfg.dilation(b), causal=cfg.causal)
            blocks.append((wide, Conv1dSpec(c, c, 1)))
        shrink = Conv1dSpec(c, cfg.joints_out * cfg.out_dims, 1)
        return expand, blocks, shrink

    def _residual_slice(self, t_in: int, t_out: int, wide: Conv1dSpec, strided: bool):
        """Index selecting the residual frames that line up with the block output."""
        if strided:
            w = wide.kernel_width
            start = w - 1 if self.config.causal else w // 2
            return slice(start, None, w)
        # causal blocks keep the rightmost frames, centered ones trim both sides
        start = wide.alignment
        return slice(start, start + t_out)

    # -- passes ------------------------------------------------------------

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.num_joints * cfg.in_dims:
            raise ShapeError(
                f"model input must be [N, {cfg.num_joints * cfg.in_dims}, T], got shape {x.shape}"
            )

    def _run(self, x, strided, training, rng, record):
        expand, block_specs, shrink = self._specs(strided)
        tape = []
        x = self.expand.forward(x, expand, training, rng, record)
        for (wide_u, narrow_u), (wide, narrow) in zip(self.blocks, block_specs):
            t_in = x.shape[2]
            y = wide_u.forward(x, wide, training, rng, record)
            y = narrow_u.forward(y, narrow, training, rng, record)
            sl = self._residual_slice(t_in, y.shape[2], wide, strided)
            tape.append((t_in, sl))
            x = x[:, :, sl] + y
        out = conv1d_forward(x, self.shrink_w.value, self.shrink_b.value, shrink)
        self._tape = (tape, x, shrink) if record else None
        return out

    def forward(self, x, training=False, rng=None, record=None):
        """Layer-by-layer pass: ``[N, 2J, T] -> [N, 3J, T - RF + 1]``.

        Output frame ``t`` depends on input frames ``[t, t + RF - 1]`` only; it
        is attributed to the center frame, or to the last frame when causal.
        """
        self._check_input(x)
        rf = self.receptive_field
        if x.shape[2] < rf:
            raise TemporalExtentError(
                f"insufficient temporal extent: receptive field {rf}, sequence has {x.shape[2]} frames"
            )
        return self._run(x, False, training, rng, training if record is None else record)

    def forward_strided_single(self, x, training=False, rng=None, record=None):
        """Single-frame pass over exactly ``RF`` input frames using strided convolutions.

        Computes only the intermediate states that reach the one output frame.
        Dense-mode models have no dilation to convert and use :meth:`forward`.
        """
        self._check_input(x)
        rf = self.receptive_field
        if x.shape[2] != rf:
            raise ShapeError(f"strided single-frame pass needs exactly {rf} frames, got {x.shape[2]}")
        record = training if record is None else record
        if self.config.dense_mode:
            return self._run(x, False, training, rng, record)
        return self._run(x, True, training, rng, record)

    def backward(self, grad_out):
        """Backpropagate through the last recorded pass; accumulates parameter grads."""
        if self._tape is None:
            raise RuntimeError("backward() needs a preceding forward pass with record=True")
        tape, x_last, shrink = self._tape
        g, gw, gb = conv1d_backward(grad_out, x_last, self.shrink_w.value, shrink)
        self.shrink_w.grad += gw
        self.shrink_b.grad += gb
        for (wide_u, narrow_u), (t_in, sl) in zip(reversed(self.blocks), reversed(tape)):
            g_res = np.zeros((g.shape[0], g.shape[1], t_in), g.dtype)
            g_res[:, :, sl] = g
            g = wide_u.backward(narrow_u.backward(g)) + g_res
        g = self.expand.backward(g)
        self._tape = None
        return g


def build(config: ModelConfig, seed: int = 0) -> TemporalModel:
    return TemporalModel(config, seed)


def flip_permutation(num_joints: int, left_right_pairs) -> np.ndarray:
    perm = np.arange(num_joints)
    for a, b in left_right_pairs:
        perm[a], perm[b] = b, a
    return perm


def flip_poses(poses, perm=None):
    """Mirror poses horizontally (negate x) and swap left/right joints.

    Works for 2D inputs in centered normalized coordinates and for 3D
    camera-space poses; ``poses`` is ``[..., J, D]``.
    """
    out = np.array(poses, copy=True)
    out[..., 0] *= -1
    if perm is not None:
        out = out[..., perm, :]
    return out


def pad_sequence(keypoints, model: TemporalModel):
    """Replicate boundary frames so a valid pass yields one output per input frame."""
    rf = model.receptive_field
    if model.config.causal:
        left, right = rf - 1, 0
    else:
        left = right = (rf - 1) // 2
    return np.pad(keypoints, [(left, right)] + [(0, 0)] * (keypoints.ndim - 1), mode="edge")


def predict_sequence(model: TemporalModel, keypoints, flip_augment=False, left_right_pairs=()):
    """Predict ``[T, J_out, 3]`` from ``[T, J, 2]`` normalized 2D keypoints."""
    keypoints = np.asarray(keypoints, np.float32)
    cfg = model.config
    if keypoints.ndim != 3 or keypoints.shape[1:] != (cfg.num_joints, cfg.in_dims):
        raise ShapeError(
            f"keypoints shape {keypoints.shape} incompatible with model "
            f"({cfg.num_joints} joints, {cfg.in_dims} dims)"
        )
    if keypoints.shape[0] < 1:
        raise TemporalExtentError("sequence must contain at least one frame")

    def run(kp):
        padded = pad_sequence(kp, model)
        x = padded.reshape(padded.shape[0], -1).T[None]
        out = model.forward(np.ascontiguousarray(x))
        return out[0].T.reshape(-1, cfg.joints_out, cfg.out_dims)

    pred = run(keypoints)
    if flip_augment:
        perm_in = flip_permutation(cfg.num_joints, left_right_pairs)
        perm_out = perm_in if cfg.joints_out == cfg.num_joints else None
        pred_f = flip_poses(run(flip_poses(keypoints, perm_in)), perm_out)
        pred = (pred + pred_f) / 2
    return pred
