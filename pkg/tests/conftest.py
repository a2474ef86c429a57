import numpy as np
import pytest

from xgrain.data import Dataset, generate_synthetic_corpus
from xgrain.encoders import ModelConfig
from xgrain.objectives import AlignmentModel

CORPUS_SEED = 501


def micro_config(vocab_size: int, **overrides) -> ModelConfig:
    """Smallest config that still exercises every code path; float64."""
    base = dict(
        vocab_size=vocab_size,
        hidden_dim=8,
        vision_layers=1,
        text_layers=1,
        fusion_layers=1,
        attention_heads=2,
        patch_size=8,
        image_size=16,
        max_text_len=8,
        projection_dim=4,
        dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """24 images at 32px: enough for batch assembly and smoke training."""
    out = tmp_path_factory.mktemp("corpus") / "tiny"
    generate_synthetic_corpus(seed=CORPUS_SEED, n_images=24, out_dir=out, image_size=32)
    return out


@pytest.fixture(scope="session")
def tiny_train(tiny_corpus_dir):
    return Dataset.open(tiny_corpus_dir)


@pytest.fixture(scope="session")
def tiny_heldout(tiny_corpus_dir):
    return Dataset.open(tiny_corpus_dir, split="heldout")


@pytest.fixture(scope="session")
def fd_corpus_dir(tmp_path_factory):
    """6 images at 16px: 2x2 patch grid, cheap enough for finite differences."""
    out = tmp_path_factory.mktemp("corpus") / "fd"
    generate_synthetic_corpus(seed=CORPUS_SEED + 1, n_images=6, out_dir=out, image_size=16)
    return out


@pytest.fixture(scope="session")
def fd_train(fd_corpus_dir):
    return Dataset.open(fd_corpus_dir)


@pytest.fixture()
def micro_model(fd_train):
    cfg = micro_config(vocab_size=len(fd_train.vocab))
    return AlignmentModel(cfg, np.random.default_rng(3))


@pytest.fixture()
def small_model(tiny_train):
    """Model sized for the 32px tiny corpus."""
    cfg = micro_config(vocab_size=len(tiny_train.vocab), image_size=32,
                       max_text_len=18, dtype="float32")
    return AlignmentModel(cfg, np.random.default_rng(4))
