import numpy as np
import pytest

from unified_reasoner.codec import Vocab
from unified_reasoner.model import DecoderConfig, EncoderConfig, ModelConfig, SlotConfig, UnifiedModel
from unified_reasoner.worldgen.acre import AcreConfig
from unified_reasoner.worldgen.cater import CaterConfig
from unified_reasoner.worldgen.records import generate, split_seeds


def tiny_config(vocab: Vocab, backbone="conv-stem", slots=1, mode="cross_attention", dim=16,
                max_frames=8, max_objects=6) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(backbone=backbone, dim=dim, depth=1, heads=2, patch_size=8,
                              conv_channels=(4, 8, 8), conv_strides=(2, 2, 2)),
        slots=SlotConfig(num_slots=slots, mode=mode),
        decoder=DecoderConfig(depth=1, heads=2, max_len=5 * max_objects + 2, vocab_size=vocab.size),
        max_frames=max_frames, max_objects=max_objects)


@pytest.fixture(scope="session")
def vocab():
    return Vocab(num_cells=16)


@pytest.fixture(scope="session")
def cater_small():
    return generate("cater", split_seeds(11, "train", 24), CaterConfig())


@pytest.fixture(scope="session")
def acre_small():
    return generate("acre", split_seeds(11, "train", 24), AcreConfig())


@pytest.fixture
def tiny_model(vocab):
    return UnifiedModel(tiny_config(vocab), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting
ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
