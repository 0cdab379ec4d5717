import pytest

from msreid.config import RunConfig
from msreid.data import generate_synthetic, load_manifest


def tiny_config(seed=0, **train):
    """Smallest config that exercises every component: 4 train ids, (32, 16) images."""
    cfg = RunConfig(seed=seed)
    cfg.data.n_identities = 4
    cfg.data.n_test_identities = 2
    cfg.data.n_samples_per_identity = 4
    cfg.data.image_size = (32, 16)
    cfg.augment.pad = 2
    t = cfg.train
    t.epochs, t.warmup_epochs, t.decay_epochs, t.decay_lrs = 2, 1, (), ()
    t.P, t.N = 2, 2
    for k, v in train.items():
        setattr(t, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    cfg = tiny_config()
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_synthetic(cfg.data, root, cfg.spectra_set)
    return load_manifest(root / "manifest.jsonl", cfg.spectra_set)


@pytest.fixture
def make_cfg():
    return tiny_config
