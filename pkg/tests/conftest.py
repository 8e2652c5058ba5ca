import pytest
import torch

from adpo.shapesdata import DEFAULT_PROMPT, Scene, Shape, default_vocabulary, render_batch
from adpo.toyvlm import ArchConfig, init_model


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def tiny_arch():
    # 32x32 input is fixed by the data; everything else is shrunk for speed
    return ArchConfig(patch=8, enc_width=8, enc_depth=1, enc_heads=2, dec_width=8, dec_depth=1, dec_heads=2,
                      mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_arch):
    return init_model(tiny_arch, seed=0)


@pytest.fixture
def vocab():
    return default_vocabulary()


@pytest.fixture
def prompt(vocab):
    return vocab.encode(DEFAULT_PROMPT)


@pytest.fixture
def images():
    scenes = [
        Scene((Shape("circle", "red", "top"),)),
        Scene((Shape("square", "blue", "left"), Shape("triangle", "green", "right"))),
        Scene((Shape("triangle", "yellow", "bottom"),)),
        Scene((Shape("square", "green", "top"), Shape("circle", "yellow", "bottom"))),
    ]
    return render_batch(scenes)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
