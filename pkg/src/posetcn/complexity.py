"""Analytic parameter and FLOP accounting.

Only matrix multiplications are counted: a width-``W`` convolution from
``C_in`` to ``C_out`` channels costs ``2 W C_in C_out`` FLOPs per output
frame, amortized over an infinitely long sequence.  Parameters are the
trainable floats: convolution weights, the output layer's bias and the
batch-norm scale/shift pairs (running statistics are not parameters).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, TemporalModel
from .numerics import count_macs


@dataclass(frozen=True)
class LayerCost:
    index: int
    name: str
    kernel_width: int
    in_channels: int
    out_channels: int
    flops_per_frame: int
    params: int


@dataclass(frozen=True)
class Estimate:
    total_params: int
    total_flops_per_frame: int
    layers: tuple[LayerCost, ...]


def _layer(index, name, width, c_in, c_out, batch_norm):
    params = width * c_in * c_out + (2 * c_out if batch_norm else c_out)
    return LayerCost(index, name, width, c_in, c_out, 2 * width * c_in * c_out, params)


def layer_table(config: ModelConfig) -> list[LayerCost]:
    c, w = config.channels, config.kernel_width
    layers = [_layer(0, "expand", w, config.num_joints * config.in_dims, c, True)]
    for b in range(config.blocks):
        wide = (w - 1) * config.dilation(b) + 1 if config.dense_mode else w
        layers.append(_layer(len(layers), f"blocks.{b}.wide", wide, c, c, True))
        layers.append(_layer(len(layers), f"blocks.{b}.narrow", 1, c, c, True))
    layers.append(_layer(len(layers), "shrink", 1, c, config.joints_out * config.out_dims, False))
    return layers


def estimate(config: ModelConfig) -> Estimate:
    layers = layer_table(config)
    return Estimate(sum(l.params for l in layers), sum(l.flops_per_frame for l in layers), tuple(layers))


@dataclass
class VerificationReport:
    estimated_params: int
    model_params: int
    estimated_flops: int
    amortized_flops: float  # marginal cost per extra output frame
    raw_flops_per_frame: float  # total count / output frames, includes boundary overhead
    layer_diffs: list[str]

    @property
    def params_match(self) -> bool:
        return self.estimated_params == self.model_params

    @property
    def flops_rel_error(self) -> float:
        return abs(self.amortized_flops - self.estimated_flops) / self.estimated_flops

    @property
    def ok(self) -> bool:
        return self.params_match and self.flops_rel_error < 0.01 and not self.layer_diffs


def _count_flops(model: TemporalModel, frames: int, rng) -> int:
    cfg = model.config
    x = rng.standard_normal((1, cfg.num_joints * cfg.in_dims, frames)).astype(np.float32)
    with count_macs() as macs:
        model.forward(x)
    return 2 * macs[0]


def verify_against_model(model: TemporalModel, frames: int = 10_000, seed: int = 0) -> VerificationReport:
    """Check the analytic estimate against stored weights and an instrumented forward pass.

    The forward pass runs on ``frames`` output frames and once more on a
    single output frame; their difference isolates the amortized cost.
    """
    est = estimate(model.config)
    rng = np.random.default_rng(seed)
    rf = model.receptive_field
    long_count = _count_flops(model, rf + frames - 1, rng)
    short_count = _count_flops(model, rf, rng)

    stored = {}
    for p in model.parameters():
        layer = p.name.split(".bn.")[0] if ".bn." in p.name else p.name.rsplit(".", 1)[0]
        stored[layer] = stored.get(layer, 0) + p.value.size
    diffs = [f"{l.name}: estimated {l.params} params, model stores {stored.get(l.name, 0)}"
             for l in est.layers if stored.get(l.name, 0) != l.params]
    return VerificationReport(
        estimated_params=est.total_params,
        model_params=model.num_parameters(),
        estimated_flops=est.total_flops_per_frame,
        amortized_flops=(long_count - short_count) / (frames - 1),
        raw_flops_per_frame=long_count / frames,
        layer_diffs=diffs,
    )
