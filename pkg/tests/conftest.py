import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cyclecap import autodiff as ad
from cyclecap.data import CaptionDataset, SynthConfig, synth_generate
from cyclecap.models import ModelBundle, ModelConfig

TINY_T = 12


def tiny_model_config(vocab_size: int, **overrides) -> ModelConfig:
    base = dict(vocab_size=vocab_size, image_size=16, caption_length=TINY_T, embed_dim=8, captioner_hidden=8,
                text_hidden=6, cond_dim=4, latent_dim=5, encoder_channels=(3, 4, 2), gen_channels=4,
                disc_channels=3, disc_text_dim=3, dy_hidden=6, dy_fusion_dim=5)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    synth_generate(40, seed=3, out_dir=root, config=SynthConfig(image_size=16, supersample=2))
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return CaptionDataset.load(tiny_data_dir, T=TINY_T)


@pytest.fixture
def bundle64(tiny_dataset):
    """A float64 bundle with the encoder marked trained and frozen."""
    with ad.precision(np.float64):
        b = ModelBundle(tiny_model_config(len(tiny_dataset.vocab)), np.random.default_rng(0))
    b.freeze_image_encoder()
    return b


@pytest.fixture(autouse=True)
def _float64_default():
    with ad.precision(np.float64):
        yield


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
