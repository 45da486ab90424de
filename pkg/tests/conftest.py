import numpy as np
import pytest

from coderec.corpus import SynthConfig, leave_one_out_split, synth_corpus


def max_rel_error(analytic, numeric, floor=1e-6):
    """Worst relative disagreement, ignoring entries that are jointly tiny."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / scale[mask]).max())


def central_diff(fn, x, step=1e-4):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(num_domains=2, items_per_domain=80,
                      users_per_domain=120, seq_len_min=6, seq_len_max=10,
                      embed_dim=32, latent_dim=8, overlap=0.7)
    return synth_corpus(cfg, seed=202)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    dataset, _ = small_corpus
    return leave_one_out_split(dataset)
