import warnings

import numpy as np
import pytest
import torch

from vilocal.clipset import DatasetManifest, DatasetSpec, SyntheticConfig, generate_dataset, transcoder_available
from vilocal.config import RunConfig
from vilocal.encoder import EncoderConfig

needs_transcoder = pytest.mark.skipif(not transcoder_available(), reason="no ffmpeg binary available")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_spec(n_clips=3, seed=5, frames=8, resolution=(32, 48)) -> DatasetSpec:
    synth = SyntheticConfig(n_clips=n_clips, frames_per_clip=frames, resolution=resolution, seed=seed)
    return DatasetSpec(synth, {"train": n_clips - 1, "val": 0, "test": 1})


def tiny_run_config(**train) -> RunConfig:
    cfg = RunConfig()
    cfg.data = tiny_spec()
    cfg.model = EncoderConfig.micro()
    cfg.contrastive.samples_per_class = 16
    cfg.train.epochs_stage1 = 1
    cfg.train.epochs_stage2 = 1
    cfg.train.stride = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three short 32x48 sources: two for training, one held out."""
    if not transcoder_available():
        pytest.skip("no ffmpeg binary available")
    out = tmp_path_factory.mktemp("tiny_data")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        generate_dataset(tiny_spec(), out)
    return DatasetManifest.read(out)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
