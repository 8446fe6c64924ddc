import numpy as np
import pytest

from kldiff.conditioning import default_vocabulary, tokenize_batch
from kldiff.dataio import gen_dataset
from kldiff.denoiser import DenoiserConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture
def tiny_cfg(vocab):
    return DenoiserConfig(3, 8, 8, patch=4, d_img=8, d_txt=6, d_k=4, n_blocks=1,
                          hidden=8, vocab_size=len(vocab), seed=3)


def perturbed_params(cfg, seed=0, scale=0.3):
    """Initialised parameters with the zero head and unit gains jittered, so every
    gradient path is live."""
    r = np.random.default_rng(seed)
    p = init_params(cfg, np.random.default_rng(cfg.seed))
    for k, v in p.items():
        if k.startswith("out.") or k.endswith((".g", ".b", ".b1", ".b2")):
            p.arrays[k] = v + scale * r.standard_normal(v.shape)
    return p


@pytest.fixture
def scenes(vocab):
    imgs, caps, specs = gen_dataset(6, np.random.default_rng(11))
    return imgs, caps, tokenize_batch(caps, vocab)
