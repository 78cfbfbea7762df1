#!/usr/bin/env python3
"""
Reference-scale acceptance runs. These take minutes; run them with

    pytest -m slow scripts/test_acceptance.py
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pandas as pd
import pytest
from scipy.stats import spearmanr

from kgfm.config import load_config
from kgfm.pipeline import Run, run_experiment
from kgfm.registry import MODULES, PBM_IDS
from kgfm.selector import infer_weights_pooled
from kgfm.synthetic_pbm import generate_drivers, simulate, synthesize_observations
from kgfm.weights import WeightMatrix

from conftest import tiny_config

pytestmark = pytest.mark.slow

ANNUAL = {"Yield", "Delta_SOC"}
FIDELITY_FLOOR = {"carbon": 0.9, "thermal": 0.9, "water": 0.8, "nitrogen": 0.8}


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    cfg = load_config(output_dir=str(tmp_path_factory.mktemp("reference") / "run"))
    result = run_experiment(cfg)
    return cfg, result, Run(cfg)


def test_surrogate_fidelity(reference):
    _, result, _ = reference
    df = pd.read_csv(result["run_dir"] / "reports" / "fidelity.csv")
    surrogates = df[df["module"].isin(MODULES) & ~df["variable"].isin(ANNUAL)]
    assert len(surrogates) > 0
    for row in surrogates.to_dict(orient="records"):
        assert row["r2_holdout"] >= FIDELITY_FLOOR[row["module"]], row


def test_decoder_fidelity(reference):
    _, result, _ = reference
    df = pd.read_csv(result["run_dir"] / "reports" / "fidelity.csv")
    decoder = df[(df["module"] == "decoder") & df["variable"].isin(["GPP", "CO2_FLUX"])]
    assert len(decoder) == 2 * len(PBM_IDS)
    assert (decoder["r2_holdout"] >= 0.85).all(), decoder


def test_selector_recovers_swept_weights(reference):
    _, result, _ = reference
    df = pd.read_csv(result["run_dir"] / "reports" / "recovery.csv")
    for module in MODULES:
        curve = df[df["module"] == module].sort_values("preset_weight")
        rho = spearmanr(curve["preset_weight"], curve["predicted_weight"]).correlation
        assert rho >= 0.9, (module, rho)
        assert (np.diff(curve["predicted_weight"]) >= -1e-6).all(), module
        assert np.abs(curve["predicted_weight"] - curve["preset_weight"]).mean() <= 0.15, module


@pytest.mark.parametrize("pbm", PBM_IDS)
def test_one_hot_observations_select_their_pbm(reference, pbm):
    cfg, _, run = reference
    selector = run.selector()
    sites = []
    for x, outputs in run.selector_sites("validation"):
        obs = synthesize_observations(WeightMatrix.one_hot(pbm), x, outputs, cfg.selector.observables)
        sites.append((obs, x))
    weights = infer_weights_pooled(selector, sites).weights
    for module in MODULES:
        column = weights.column(module)
        assert max(column, key=column.get) == pbm, (module, column)


def test_finetuning_does_not_hurt(reference):
    cfg, result, _ = reference
    pooled = result["metrics"].pooled()
    for variant in pooled["variant"].unique():
        gains = []
        for target in cfg.downstream.targets:
            zs = result["metrics"].lookup(variant, "zero-shot", target)["r2"]
            ft = result["metrics"].lookup(variant, "FT", target)["r2"]
            assert ft >= zs - 0.02, (variant, target, zs, ft)
            gains.append(ft > zs)
        assert sum(gains) >= 2, variant


def test_selected_mixture_is_competitive(reference):
    cfg, result, _ = reference
    m = result["metrics"]
    for target in cfg.downstream.targets:
        floor = min(m.lookup("KGFM-A", "FT", target)["r2"], m.lookup("KGFM-B", "FT", target)["r2"])
        assert m.lookup("KGFM-MS", "FT", target)["r2"] >= floor - 0.05, target


@pytest.mark.parametrize("target", ["N2O_FLUX", "GPP"])
def test_single_target_observations_run_end_to_end(tmp_path, target):
    cfg = tiny_config(tmp_path / target, downstream={"targets": [target], "T": 365, "boundary": 300})
    result = run_experiment(cfg)
    pooled = result["metrics"].pooled()
    assert set(pooled["target"]) == {target}
    assert len(pooled) == 8


def test_water_balance_is_conserved_everywhere(reference):
    cfg, _, _ = reference
    for x in generate_drivers(cfg.data.n_sites, cfg.data.T, cfg.seed):
        for pbm in PBM_IDS:
            assert np.abs(simulate(pbm, x, cfg.pbm).water_residuals).max() < 1e-9
