import numpy as np
import pytest

from posetcn.complexity import estimate, layer_table, verify_against_model
from posetcn.model import ModelConfig, TemporalModel

REFERENCE_MFLOPS_27 = [0.209, 6.291, 2.097, 6.291, 2.097, 0.104]

TABLE = [
    (dict(blocks=2), 8.56, 17.09),
    (dict(blocks=3), 12.75, 25.48),
    (dict(blocks=4), 16.95, 33.87),
    (dict(blocks=2, dense_mode=True), 29.53, 59.03),
]


def test_per_layer_mflops_27():
    layers = layer_table(ModelConfig(blocks=2))
    assert [round(l.flops_per_frame / 1e6, 3) for l in layers] == REFERENCE_MFLOPS_27


def test_rounded_layer_sum():
    layers = layer_table(ModelConfig(blocks=2))
    assert round(sum(round(l.flops_per_frame / 1e6, 3) for l in layers), 3) == 17.089


def test_layer_shapes():
    names = [l.name for l in layer_table(ModelConfig(blocks=2))]
    assert names == ["expand", "blocks.0.wide", "blocks.0.narrow", "blocks.1.wide", "blocks.1.narrow", "shrink"]


@pytest.mark.parametrize("kw,params_m,flops_m", TABLE)
def test_table_rows(kw, params_m, flops_m):
    est = estimate(ModelConfig(**kw))
    assert round(est.total_params / 1e6, 2) == params_m
    assert round(est.total_flops_per_frame / 1e6, 2) == flops_m


def test_exact_parameter_count():
    assert estimate(ModelConfig()).total_params == 8_555_571


def test_params_grow_linearly_with_blocks():
    # receptive field grows geometrically, so cost is logarithmic in the receptive field
    p = [estimate(ModelConfig(blocks=b)).total_params for b in range(1, 6)]
    steps = np.diff(p)
    assert (steps == steps[0]).all()


def test_dense_costs_more():
    for b in (1, 2, 3):
        dil = estimate(ModelConfig(blocks=b))
        dense = estimate(ModelConfig(blocks=b, dense_mode=True))
        assert dense.total_flops_per_frame > dil.total_flops_per_frame
        assert dense.total_params > dil.total_params


@pytest.mark.parametrize("kw", [dict(), dict(blocks=3), dict(dense_mode=True), dict(causal=True),
                                dict(num_joints_out=1)])
def test_verify_against_small_model(kw):
    cfg = ModelConfig(num_joints=5, channels=12, blocks=kw.pop("blocks", 2), **kw)
    report = verify_against_model(TemporalModel(cfg), frames=200)
    assert report.params_match, report.layer_diffs
    assert report.flops_rel_error < 1e-9
    assert report.ok
    assert report.raw_flops_per_frame > report.amortized_flops


def test_verify_full_size_model():
    report = verify_against_model(TemporalModel(ModelConfig()), frames=50)
    assert report.ok
    assert report.model_params == 8_555_571
