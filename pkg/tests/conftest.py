"""Shared helpers for the test suite."""

import pytest

from idfcr.config import RunConfig


def make_tiny_config(base) -> RunConfig:
    """Smallest config that exercises every pipeline stage, for wiring tests."""
    cfg = RunConfig.desk()
    cfg.data_root = str(base / "data")
    cfg.out_dir = str(base / "out")
    cfg.n_pairs = 4
    cfg.image_size = 32
    cfg.px_channels = 16
    cfg.px_heads = 4
    cfg.px_blocks = 2
    cfg.px_window = 8
    cfg.pixel_epochs = 1
    cfg.cd_hidden = 8
    cfg.cd_codebook = 32
    cfg.codec_epochs = 2
    cfg.base_width = 16
    cfg.T = 16
    cfg.sample_steps = 8
    cfg.trunk_epochs = 2
    cfg.control_epochs = 1
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg(tmp_path):
    return make_tiny_config(tmp_path)
