from __future__ import annotations

import numpy as np
import pytest
import torch

from cmad.config import PipelineConfig, StepLRConfig
from cmad.dataio import generate_synthetic_corpus


def tiny_config(seed: int = 11) -> PipelineConfig:
    """Smallest config that exercises every component; used by trainer tests."""
    cfg = PipelineConfig()
    cfg.decoder.n_layers = 1
    cfg.decoder.n_heads = 4
    cfg.decoder.ff_dim = 128
    cfg.decoder.bidirectional = False
    cfg.segmentor.refine_width = 16
    cfg.segmentor.denoiser_width = 8
    cfg.segmentor.heads = 2
    cfg.train.epochs = 1
    cfg.train.batch_size = 4
    cfg.train.seed = seed
    cfg.train.lr = 1e-3
    cfg.train.step_lr = StepLRConfig(step_size=50, decay=0.5)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus(n_classes=2, n_train=4, n_test=4, seed=7)


@pytest.fixture(scope="session")
def medium_corpus():
    return generate_synthetic_corpus(n_classes=2, n_train=6, n_test=6, seed=13)


@pytest.fixture()
def rng():
    return np.random.default_rng(123)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(123)
