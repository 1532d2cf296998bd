import numpy as np
import pytest

from dpgcl.dataset import Modality, PairBatch
from dpgcl.encoder import EncoderSpec, init_params


def central_fd(f, x, coords, h=1e-5):
    """Central differences of scalar ``f`` at ``x`` along the given coordinates."""
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[n] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def uni_instance(seed, B=6, d_x=5, hidden=(7,), d_z=4, activation="tanh"):
    rng = np.random.default_rng(seed)
    batch = PairBatch.from_arrays(rng.standard_normal((B, d_x)), rng.standard_normal((B, d_x)))
    spec = EncoderSpec(d_x, hidden, d_z, activation, init_seed=seed)
    return init_params(spec), spec, batch


def dual_instance(seed, B=6, d1=5, d2=3, hidden=(6,), d_z=4):
    rng = np.random.default_rng(seed)
    batch = PairBatch.from_arrays(
        rng.standard_normal((B, d1)), rng.standard_normal((B, d2)), modality=Modality.DUAL
    )
    s1 = EncoderSpec(d1, hidden, d_z, "tanh", init_seed=seed)
    s2 = EncoderSpec(d2, hidden, d_z, "tanh", init_seed=seed + 1000)
    return (init_params(s1), init_params(s2)), (s1, s2), batch


@pytest.fixture
def fd():
    return central_fd
