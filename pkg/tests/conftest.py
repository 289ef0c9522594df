import dataclasses

import numpy as np
import pytest

from sdmim.config import RunConfig
from sdmim.data import generate_synthetic


def tiny_config(**kw) -> RunConfig:
    """2x2 patch grid, 8-wide model: fast enough for per-test training."""
    base = dict(
        image_h=8,
        image_w=8,
        patch_size=4,
        d_model=8,
        encoder_depth=2,
        decoder_depth=1,
        heads=2,
        window=2,
        mask_ratio=0.25,
        distill_k=16,
        bottleneck=8,
        head_hidden=8,
        n_images=2,
        total_epochs=2,
        warmup_epochs=1,
    )
    base.update(kw)
    return RunConfig(**base)


def smoke_config(**kw) -> RunConfig:
    """4x4 grid at 32x32 pixels; a few seconds per short run."""
    base = dict(
        image_h=32,
        image_w=32,
        patch_size=8,
        d_model=16,
        encoder_depth=2,
        decoder_depth=1,
        heads=2,
        window=2,
        distill_k=32,
        bottleneck=16,
        head_hidden=16,
        n_images=4,
        total_epochs=2,
        warmup_epochs=1,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_images():
    cfg = tiny_config()
    return generate_synthetic(3, cfg.image_h, cfg.image_w, cfg.n_images, cfg.patch_size)


@pytest.fixture(scope="session")
def smoke_images():
    cfg = smoke_config()
    return generate_synthetic(3, cfg.image_h, cfg.image_w, cfg.n_images, cfg.patch_size)
