#!/usr/bin/env python3
"""
Tests for the weight grid, the selector and weight recovery reporting
"""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from kgfm import checkpoint as ckpt_io
from kgfm import numerics as nx
from kgfm.config import SelectorConfig
from kgfm.errors import ConfigError, DataError
from kgfm.registry import MODULES, PBM_IDS
from kgfm.selector import (
    Selector, build_weight_grid, infer_weights, infer_weights_detailed, infer_weights_pooled, recovery_curve,
    train_selector, write_recovery_csv, write_weight_report,
)
from kgfm.synthetic_pbm import DriverSeries, ObservationSeries, synthesize_observations
from kgfm.weights import WeightMatrix

CFG = SelectorConfig(hidden=6, window=5, presets_per_epoch=2, epochs=1, lr=0.01, batch_size=2)


def test_grid_sizes():
    grid = build_weight_grid()
    assert len(grid) == 6561
    assert len(build_weight_grid(N=1)) == 9
    coarse = build_weight_grid(step=0.4)
    assert coarse.axis == (0.1, 0.5, 0.9)
    assert len(build_weight_grid(N=2, step=0.4)) == 9
    for preset in build_weight_grid(N=4, step=0.4):
        assert_allclose(preset.alpha.sum(axis=0), 1.0)


def test_grid_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        build_weight_grid(M=3)
    with pytest.raises(ConfigError):
        build_weight_grid(step=0.0)
    with pytest.raises(ConfigError):
        build_weight_grid(step=0.9)


def test_reordered_grid_swaps_roles():
    grid = build_weight_grid(step=0.4)
    swapped = grid.reordered(tuple(reversed(PBM_IDS)))
    assert swapped[0].weight(PBM_IDS[0], "carbon") == pytest.approx(grid[0].weight(PBM_IDS[0], "carbon"))


@pytest.fixture
def selector(tokenizer, small_embedder_cfg):
    return Selector(tokenizer, small_embedder_cfg, CFG, nx.make_rng(0))


@pytest.fixture
def observed(drivers, outputs):
    x = drivers[0].window(0, 6)
    obs = synthesize_observations(WeightMatrix.uniform(), drivers[0], outputs[x.site_id], ["CO2_FLUX", "ET"])
    return obs.window(0, 6), x


def randomize_output_layer(s, seed=1):
    rng = np.random.default_rng(seed)
    for name in ("selector.mlp.out.W", "selector.mlp.out.b"):
        s.params[name].data = rng.normal(size=s.params[name].shape)


def test_untrained_selector_predicts_the_even_mixture(selector, observed):
    w = infer_weights(selector, *observed)
    assert_allclose(w.alpha, 0.5, atol=1e-15)


def test_weights_are_columns_of_a_distribution(selector, observed):
    randomize_output_layer(selector)
    w = infer_weights(selector, *observed)
    assert w.alpha.shape == (len(PBM_IDS), len(MODULES))
    assert_allclose(w.alpha.sum(axis=0), 1.0, atol=1e-12)
    assert ((w.alpha > 0) & (w.alpha < 1)).all()


def test_repeating_a_day_does_not_change_the_weights(selector, observed):
    randomize_output_layer(selector)
    obs, x = observed
    once = [3]
    thrice = [3, 3, 3]
    w1 = infer_weights(selector, ObservationSeries(obs.site_id, obs.names, obs.values[once], obs.mask[once]),
                       DriverSeries(x.site_id, x.features[once]))
    w3 = infer_weights(selector, ObservationSeries(obs.site_id, obs.names, obs.values[thrice], obs.mask[thrice]),
                       DriverSeries(x.site_id, x.features[thrice]))
    assert np.abs(w1.alpha - w3.alpha).max() < 1e-12


def test_single_target_and_unobserved_days(selector, observed):
    obs, x = observed
    single = obs.restricted(["ET"])
    single.mask[:2] = False
    inference = infer_weights_detailed(selector, single, x)
    assert inference.days.tolist() == [3, 4, 5, 6]
    assert inference.raw.shape == (4, len(PBM_IDS) * len(MODULES))


def test_empty_observation_set_is_refused(selector, observed):
    obs, x = observed
    empty = ObservationSeries(obs.site_id, obs.names, obs.values, np.zeros_like(obs.mask))
    with pytest.raises(DataError, match="no observed day"):
        infer_weights(selector, empty, x)
    with pytest.raises(DataError):
        infer_weights(selector, obs.window(0, 3), x)


def test_pooling_one_site_matches_single_inference(selector, observed):
    randomize_output_layer(selector)
    single = infer_weights(selector, *observed)
    pooled = infer_weights_pooled(selector, [observed])
    assert_allclose(pooled.weights.alpha, single.alpha, atol=1e-12)


def test_training_is_deterministic_and_leaves_the_even_mixture(tokenizer, small_embedder_cfg, drivers, outputs):
    sites = [(x, outputs[x.site_id]) for x in drivers]
    grid = build_weight_grid(step=0.4)
    curves = []
    for _ in range(2):
        s = Selector(tokenizer, small_embedder_cfg, CFG, nx.make_rng(2))
        _, curve = train_selector(s, sites, grid, epochs=2, lr=0.01, seed=5)
        curves.append(curve)
    assert len(curves[0]) == 3
    assert curves[0] == curves[1]
    assert np.abs(s.params["selector.mlp.out.W"].data).max() > 0


def test_swapping_pbm_roles_gives_the_same_weights(tokenizer, small_embedder_cfg, drivers, outputs, observed):
    sites = [(x, outputs[x.site_id]) for x in drivers]
    grid = build_weight_grid(step=0.4)
    mirrored = tuple(reversed(PBM_IDS))
    a = Selector(tokenizer, small_embedder_cfg, CFG, nx.make_rng(2))
    b = Selector(tokenizer, small_embedder_cfg, CFG, nx.make_rng(2), pbm_ids=mirrored)
    train_selector(a, sites, grid, epochs=2, lr=0.01, seed=5)
    train_selector(b, sites, grid.reordered(mirrored), epochs=2, lr=0.01, seed=5)
    assert np.abs(b.params["selector.mlp.out.W"].data).max() > 0

    wa = infer_weights(a, *observed)
    wb = infer_weights(b, *observed)
    for module in MODULES:
        assert abs(wa.weight("PBM-A", module) - wb.weight("PBM-A", module)) < 0.05
        assert wb.weight("PBM-A", module) + wb.weight("PBM-B", module) == pytest.approx(1.0)


def test_training_needs_sites(selector):
    with pytest.raises(DataError):
        train_selector(selector, [], build_weight_grid(step=0.4), epochs=1, lr=0.01, seed=0)


def test_training_refuses_annual_observables(tokenizer, small_embedder_cfg, drivers, outputs):
    cfg = SelectorConfig(hidden=6, window=5, presets_per_epoch=2, epochs=1, lr=0.01, batch_size=2,
                         observables=["CO2_FLUX", "Delta_SOC"])
    s = Selector(tokenizer, small_embedder_cfg, cfg, nx.make_rng(0))
    sites = [(x, outputs[x.site_id]) for x in drivers]
    with pytest.raises(ConfigError, match="Delta_SOC"):
        train_selector(s, sites, build_weight_grid(step=0.4), epochs=1, lr=0.01, seed=0)


def test_checkpoint_round_trip(tmp_path, selector, observed, tokenizer):
    randomize_output_layer(selector)
    path = ckpt_io.save(selector.to_checkpoint(seed=1), tmp_path / "selector.json")
    back = Selector.from_checkpoint(ckpt_io.load(path, kind="selector"), tokenizer)
    assert_array_equal(infer_weights(back, *observed).alpha, infer_weights(selector, *observed).alpha)


def test_recovery_csv_and_weight_report(tmp_path, selector, drivers, outputs, observed):
    sites = [(x, outputs[x.site_id]) for x in drivers[:2]]
    rows = recovery_curve(selector, sites, "water", sweep=(0.1, 0.5, 0.9), window=5)
    assert [r["preset_weight"] for r in rows] == [0.1, 0.5, 0.9]
    assert all(r["predicted_weight"] == pytest.approx(0.5) for r in rows)
    path = write_recovery_csv(rows, tmp_path / "recovery.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "preset_weight,predicted_weight,module"
    assert len(lines) == 4

    report = json.loads(write_weight_report(infer_weights_detailed(selector, *observed),
                                            tmp_path / "weights.json").read_text())
    assert set(report["diagnostics"]) == {"days", "raw_outputs", "layout"}
    assert len(report["diagnostics"]["layout"]) == len(PBM_IDS) * len(MODULES)
