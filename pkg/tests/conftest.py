import os

import numpy as np
import pytest
import torch

import driver
from src.core.data_toy import build_codebook, synth_dataset
from src.core.model import ModelConfig, build_model

# Small enough that every command finishes in seconds on a CPU
DATA_OVERRIDES = [
    "data.num_classes=3",
    "data.per_class=6",
    "data.image_side=16",
    "data.patch_side=4",
    "data.vocab_size=8",
    "data.codebook_iterations=5",
]
RUN_OVERRIDES = [
    "model.layers=2",
    "model.width=16",
    "model.heads=2",
    "model.tap_depth=1",
    "model.mlp_ratio=2",
    "train.batch_size=4",
    "train.steps=4",
    "train.warmup_steps=2",
    "run.log_timing=false",
    "run.progress=false",
    "run.checkpoint_every=2",
    "run.log_every=0",
    "diagnostics.traces=8",
    "diagnostics.pairs=6",
    "probe.epochs=5",
    "probe.steps=4,8,12,16",
]


def run_driver(*argv, overrides=()):
    """driver.main with --set flags in front of the subcommand; returns the exit code."""
    args = []
    for item in overrides:
        args += ["--set", item]
    return driver.main(args + list(argv))


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=2, width=16, heads=2, vocab_size=16, seq_len=16, num_classes=4,
                       tap_depth=1, mask_ratio=0.25, mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def tiny_tokens(tiny_config):
    generator = torch.Generator().manual_seed(0)
    tokens = torch.randint(0, tiny_config.vocab_size, (3, tiny_config.seq_len), generator=generator)
    conditions = torch.tensor([0, 1, tiny_config.null_id])
    return tokens, conditions


@pytest.fixture(scope="session")
def toy_images():
    return synth_dataset(3, 4, 16, seed=7, patch_side=4)


@pytest.fixture(scope="session")
def toy_codebook(toy_images):
    return build_codebook(toy_images, 8, 4, seed=1, iterations=5)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data"))
    assert run_driver("make-data", "--out", path, overrides=DATA_OVERRIDES) == 0
    return path


@pytest.fixture(scope="session")
def run_overrides(data_dir):
    return DATA_OVERRIDES + [f"data.dir={data_dir}"] + RUN_OVERRIDES


@pytest.fixture(scope="session")
def star_run(tmp_path_factory, run_overrides):
    path = os.path.join(str(tmp_path_factory.mktemp("runs")), "star")
    assert run_driver("train", "--star", "--out", path, overrides=run_overrides) == 0
    return path


@pytest.fixture(scope="session")
def baseline_run(tmp_path_factory, run_overrides):
    path = os.path.join(str(tmp_path_factory.mktemp("runs")), "baseline")
    assert run_driver("train", "--baseline", "--out", path, overrides=run_overrides) == 0
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)
