import numpy as np
import pytest

from armar import config as config_mod
from armar import pipeline


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(seed=77, n_patients=4, slices=6, **extra):
    cfg = config_mod.defaults()
    cfg.override("seed", seed)
    cfg.override("data.n_patients", n_patients)
    cfg.override("data.slices_per_patient", slices)
    cfg.override("vae.epochs", 1)
    cfg.override("align.epochs", 1)
    cfg.override("inv.steps", 20)
    for key, value in extra.items():
        cfg.override(key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 4-patient corpus shared by IO-level tests (never mutated)."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = tiny_config()
    pipeline.generate_corpus(cfg, root, force=True)
    return root, cfg
