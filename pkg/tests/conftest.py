import numpy as np
import pytest

from posetcn.model import ModelConfig, TemporalModel
from posetcn.synthetic import SynthSpec, generate_synthetic


def numeric_grad(f, x, indices, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. ``x[i]`` for each index (``x`` mutated in place)."""
    out = []
    for i in indices:
        old = x[i]
        x[i] = old + h
        a = f()
        x[i] = old - h
        b = f()
        x[i] = old
        out.append((a - b) / (2 * h))
    return np.array(out)


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / scale))


def sample_indices(shape, rng, n):
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(n)]


def check_grad(f, x, analytic, rng, n=25, h=1e-6):
    idx = sample_indices(x.shape, rng, n)
    num = numeric_grad(f, x, idx, h)
    return rel_err([analytic[i] for i in idx], num)


def small_model(seed=0, **kw):
    base = dict(num_joints=3, blocks=2, channels=8, dropout_p=0.0)
    base.update(kw)
    return TemporalModel(ModelConfig(**base), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(SynthSpec(num_sequences=3, frames_per_sequence=60, num_cameras=2, seed=5))
