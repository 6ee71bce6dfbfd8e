"""Shared fixtures: BLAS thread pinning and small model configs."""

import os

import pytest
import threadpoolctl

from histream.model import ModelConfig
from histream.rope import RopeConfig


@pytest.fixture(scope="session", autouse=True)
def pin_threads():
    """Single-threaded BLAS keeps timings stable and results bit-reproducible."""
    limit = int(os.environ.get("HISTREAM_THREADS", "1"))
    with threadpoolctl.threadpool_limits(limits=limit):
        yield


def small_config(**overrides) -> ModelConfig:
    """Fast config exercising both resolutions (head_dim 16, NTK-scalable)."""
    base = dict(
        d_model=32, n_layers=2, n_heads=2, latent_channels=2,
        low_res=(4, 4), chunk_frames=3, d_cond=4, t_embed_dim=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_config(**overrides) -> ModelConfig:
    """2-layer micro-model for gradient checks.

    head_dim 8 splits (2, 4, 2); the 2-dim spatial axis cannot carry NTK
    rescaling, so the micro model runs vanilla RoPE at both resolutions.
    """
    base = dict(
        d_model=16, n_layers=2, n_heads=2, latent_channels=2,
        low_res=(4, 4), chunk_frames=2, d_cond=5, t_embed_dim=8,
        rope=RopeConfig.default(8, ntk_scale=(1.0, 1.0)),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def micro_cfg():
    return micro_config()
