#!/usr/bin/env python3
"""
Capacity checks: every trainable network must be able to memorize a tiny
fixed dataset. Each run takes several hundred full-batch Adam steps.

    pytest -m slow scripts/test_capacity.py
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest

from kgfm import numerics as nx
from kgfm.baseline import BaselineLSTM
from kgfm.config import DecoderConfig, EmbedderConfig, EncoderConfig, SelectorConfig
from kgfm.decoder import Decoder, make_examples, target_matrix
from kgfm.encoder import SurrogateModel, train_surrogate
from kgfm.numerics import Standardizer
from kgfm.selector import Selector, WeightGrid
from kgfm.synthetic_pbm import generate_drivers, simulate, synthesize_observations

pytestmark = pytest.mark.slow

EMB = EmbedderConfig(d_model=16, d_tok=8, d_ff=16, max_len=512)


def overfit(loss_fn, params, steps, lr):
    """Full-batch Adam on a fixed loss; returns (initial, final) loss."""
    opt = nx.Adam(params, learning_rate=lr)
    first = nx.fit_step(loss_fn, opt)
    for _ in range(steps - 1):
        nx.fit_step(loss_fn, opt)
    return first, loss_fn().item()


@pytest.fixture(scope="module")
def sites(pbm_config):
    return [(x, simulate("PBM-A", x, pbm_config)) for x in generate_drivers(8, 30, seed=13)]


def test_surrogate_memorizes_eight_sites(sites):
    cfg = EncoderConfig(hidden1=16, hidden2=16, q_size=4, epochs=300, lr=0.01, batch_size=8)
    model = SurrogateModel("PBM-A", "thermal", cfg, nx.make_rng(0))
    _, curve = train_surrogate(model, sites, epochs=cfg.epochs, lr=cfg.lr, seed=0, batch_size=8)
    assert curve[-1] < 0.1 * curve[0]


def test_decoder_memorizes_eight_windows(tokenizer, drivers, outputs):
    targets = ("GPP", "N2O_FLUX")
    d = Decoder(tokenizer, EMB, DecoderConfig(hidden=16), nx.make_rng(0), targets=targets)
    examples = make_examples(d, {x.site_id: {"carbon": outputs[x.site_id]["PBM-A"].bundles["carbon"]}
                                 for x in drivers[:2]},
                             {x.site_id: x for x in drivers[:2]},
                             {x.site_id: outputs[x.site_id]["PBM-A"] for x in drivers[:2]})
    picks = [(ex, start) for ex in examples for start in (20, 25, 30, 35)]
    windows = [ex.inputs[s:s + 4] for ex, s in picks]
    y = np.stack([ex.targets[s:s + 4] for ex, s in picks])
    d.y_scale = Standardizer.fit(y.reshape(-1, len(targets)))
    target = d.y_scale.apply(y)
    mask = np.isfinite(target)

    first, final = overfit(lambda: nx.mse(d.forward_batch(windows), target, mask), d.params, steps=300, lr=0.01)
    assert final < 0.1 * first


def test_selector_memorizes_a_two_preset_grid(tokenizer, drivers, outputs):
    grid = WeightGrid(np.array([[0.9] * 4, [0.1] * 4]), step=0.8)
    cfg = SelectorConfig(hidden=16, window=5, observables=["CO2_FLUX", "N2O_FLUX"])
    s = Selector(tokenizer, EMB, cfg, nx.make_rng(0))
    windows, targets = [], []
    for i, x in enumerate(drivers[:2]):
        preset = grid[i]
        obs = synthesize_observations(preset, x, outputs[x.site_id], cfg.observables)
        for start in (10, 17, 24, 31):
            days, _ = s.encode_days(obs.window(start, start + 5), x.window(start, start + 5))
            windows.append(days)
            targets.append(preset.alpha.T)
    target = np.stack(targets)

    first, final = overfit(lambda: nx.mse(s.forward_windows(windows), target), s.params, steps=500, lr=0.01)
    assert final < 0.1 * first


def test_baseline_memorizes_eight_sites(sites):
    targets = ("CO2_FLUX", "N2O_FLUX", "ET")
    model = BaselineLSTM(DecoderConfig(hidden=32), nx.make_rng(0), targets=targets)
    inputs = [x.features[10:20] for x, _ in sites]
    y = np.stack([target_matrix(out, x.T, targets)[10:20] for x, out in sites])
    model.x_scale = Standardizer.fit(np.concatenate(inputs))
    model.y_scale = Standardizer.fit(y.reshape(-1, len(targets)))
    target = model.y_scale.apply(y)

    first, final = overfit(lambda: nx.mse(model.forward_batch(inputs), target), model.params, steps=300, lr=0.01)
    assert final < 0.1 * first
