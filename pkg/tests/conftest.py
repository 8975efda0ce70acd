import numpy as np
import pytest
import torch

from caresep.datagen import SoundClassSpec, synth_dataset
from caresep.model import tiny_config
from caresep.training import ClipBank, TrainConfig, pretrain_classifier


def pytest_configure(config):
    torch.use_deterministic_algorithms(True)


TINY_SPECS = [
    SoundClassSpec("tone", "harmonic-tone", {"f0_hz": (200.0, 300.0), "n_harmonics": (3, 3)}),
    SoundClassSpec("bandnoise", "band-noise", {"low_hz": (1200.0, 1300.0), "high_hz": (1800.0, 1900.0)}),
    SoundClassSpec("amnoise", "am-noise", {"am_rate_hz": (7.0, 9.0), "low_hz": (2800.0, 2900.0), "high_hz": (3500.0, 3600.0)}),
    SoundClassSpec("clicks", "click-train", {"click_rate_hz": (18.0, 22.0), "decay_ms": (1.0, 2.0)}),
]


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Four synthetic classes at 8 kHz, 0.25 s clips: small enough for the tiny config."""
    out = tmp_path_factory.mktemp("tiny_data")
    return synth_dataset(TINY_SPECS, n_per_class=8, clip_seconds=0.25, sample_rate=8000, seed=0, out_dir=out)


@pytest.fixture(scope="session")
def tiny_classifier(tiny_data, tmp_path_factory):
    path = tmp_path_factory.mktemp("tiny_cls") / "classifier.safetensors"
    cfg = tiny_config(n_classes=4)
    train = ClipBank.from_clips(tiny_data.load_split("train"))
    pretrain_classifier(train, tiny_data.load_split("eval"), cfg,
                        TrainConfig(pretrain_epochs=2, segment_frames=0), out_path=path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
