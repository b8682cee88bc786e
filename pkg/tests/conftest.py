import numpy as np
import pytest
import torch

from reportalign import synth
from reportalign.config import SynthConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A quick corpus shared by the unit tests (not the acceptance runs)."""
    out = tmp_path_factory.mktemp("corpus_small")
    cfg = SynthConfig(seed=5, n_reports=300, n_images=300, n_eval=120, n_pairs=60)
    synth.build_corpus(cfg, str(out))
    return synth.load_corpus(str(out))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
