"""
Shared fixtures: tiny configurations so every fast test finishes in seconds.
"""

import os
import sys

# Add the src directory to Python path for local testing
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest

from kgfm.config import EmbedderConfig, load_config, replace
from kgfm.linearizer import Tokenizer
from kgfm.synthetic_pbm import DriverSeries, generate_drivers, simulate

TINY_SECTIONS = {
    "data": {"n_sites": 5, "T": 40, "validation_fraction": 0.2},
    "encoder": {"hidden1": 8, "hidden2": 8, "q_size": 4, "epochs": 1, "lr": 0.01, "batch_size": 2},
    "embedder": {"d_model": 8, "d_tok": 8, "d_ff": 8, "max_len": 512},
    "decoder": {"hidden": 8, "epochs": 1, "lr": 0.01, "finetune_epochs": 1, "finetune_lr": 0.001,
                "window": 5, "windows_per_epoch": 2, "batch_size": 2},
    "selector": {"hidden": 8, "window": 5, "presets_per_epoch": 2, "epochs": 1, "lr": 0.01, "batch_size": 2},
    # early-year days have no canopy, so GPP is flat zero at this scale
    "downstream": {"targets": ["CO2_FLUX", "N2O_FLUX"], "n_sites": 3, "T": 40, "boundary": 30},
}


def tiny_config(output_dir, **sections):
    cfg = load_config(seed=7, output_dir=str(output_dir))
    merged = {k: dict(v) for k, v in TINY_SECTIONS.items()}
    for name, values in sections.items():
        merged.setdefault(name, {}).update(values)
    return replace(cfg, **merged)


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(tmp_path / "run")


@pytest.fixture(scope="session")
def pbm_config():
    return load_config().pbm


@pytest.fixture(scope="session")
def drivers():
    return generate_drivers(3, 40, seed=3)


@pytest.fixture(scope="session")
def outputs(drivers, pbm_config):
    """{site: {pbm: PBMOutput}} for the session drivers."""
    return {d.site_id: {p: simulate(p, d, pbm_config) for p in ("PBM-A", "PBM-B")} for d in drivers}


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer.from_registry()


@pytest.fixture
def small_embedder_cfg():
    return EmbedderConfig(d_model=6, d_tok=4, d_ff=5, max_len=512)


def with_columns(x: DriverSeries, **columns) -> DriverSeries:
    """Copy of ``x`` with whole driver columns replaced by constants or arrays."""
    from kgfm.registry import DRIVERS

    features = x.features.copy()
    for name, value in columns.items():
        features[:, DRIVERS.index(name)] = value
    return DriverSeries(x.site_id, features)


def rng(seed=0):
    return np.random.default_rng(seed)
