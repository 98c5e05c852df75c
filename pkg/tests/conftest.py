import os
from pathlib import Path

import numpy as np
import pytest

from cvrec import data as d
from cvrec import synthetic
from cvrec.train import TrainConfig, fit

# raw-dataset discovery: CVREC_DATA_DIR or ./data, expecting ml-100k/u.data etc.
DATA_DIR = Path(os.environ.get("CVREC_DATA_DIR", "data"))
ML100K_DIR = DATA_DIR / "ml-100k"
RUN_FULL = os.environ.get("CVREC_RUN_FULL", "") == "1"

needs_ml100k = pytest.mark.skipif(
    not (ML100K_DIR / "u.data").exists(),
    reason=f"MovieLens-100K not found at {ML100K_DIR} (set CVREC_DATA_DIR)",
)
needs_full_run = pytest.mark.skipif(
    not RUN_FULL, reason="multi-hour training run; set CVREC_RUN_FULL=1 to enable"
)


def small_config(**overrides) -> TrainConfig:
    """Training config sized for the synthetic block instances."""
    base = dict(
        batch_positives=16,
        neg_ratio=3,
        learning_rate=3e-3,
        max_epochs=40,
        patience=40,
        seed=11,
        latent_dim=8,
        prior_hidden=16,
        inference_hidden=(32, 16),
        decoder_hidden=(16, 32),
        val_users=0,
        val_samples=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def block_data():
    return synthetic.block_dataset(seed=5, density=1.0, noise=0.0)


@pytest.fixture(scope="session")
def trained_block(block_data):
    """A model overfit to the clean synthetic blocks; shared across modules."""
    result = fit(block_data, small_config(max_epochs=120))
    return block_data, result


@pytest.fixture(scope="session")
def ml100k_dataset():
    if not (ML100K_DIR / "u.data").exists():
        pytest.skip(f"MovieLens-100K not found at {ML100K_DIR} (set CVREC_DATA_DIR)")
    return d.prepare_dataset("ml-100k", ML100K_DIR, seed=7)
