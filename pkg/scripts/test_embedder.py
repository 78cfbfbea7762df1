#!/usr/bin/env python3
"""
Tests for the attention embedder
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from kgfm import numerics as nx
from kgfm.config import DecoderConfig, EmbedderConfig
from kgfm.decoder import Decoder, make_examples, train_decoder
from kgfm.embedder import Embedder, embed, embed_batch
from kgfm.errors import SchemaError, ShapeError
from kgfm.linearizer import Tokenizer
from kgfm.numerics import Standardizer
from kgfm.registry import REGISTRY


def random_sequences(tokenizer, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        names = [m for m in REGISTRY.names if rng.random() < 0.3] or ["GPP"]
        record = {m: float(rng.normal() * 10.0 ** rng.integers(-3, 3)) for m in names}
        out.append(tokenizer.encode_record(record))
    return out


@pytest.fixture
def embedder(tokenizer, small_embedder_cfg):
    return Embedder(tokenizer, small_embedder_cfg, nx.make_rng(0))


def test_batch_matches_loop(embedder, tokenizer):
    seqs = random_sequences(tokenizer, 32)
    batch = embed_batch(embedder, seqs)
    loop = np.stack([embed(embedder, s) for s in seqs])
    assert batch.shape == (32, embedder.output_dim)
    assert np.abs(batch - loop).max() < 1e-12
    assert np.abs(embed_batch(embedder, seqs, chunk=5) - batch).max() < 1e-12


def test_batch_permutation_permutes_rows(embedder, tokenizer):
    seqs = random_sequences(tokenizer, 6, seed=1)
    order = [3, 0, 5, 1, 4, 2]
    a = embed_batch(embedder, seqs)
    b = embed_batch(embedder, [seqs[i] for i in order])
    assert np.abs(a[order] - b).max() < 1e-12


def test_identical_sequences_identical_embeddings(embedder, tokenizer):
    s = tokenizer.encode_record({"GPP": 2.5, "TMAX": 30.0})
    assert_array_equal(embed(embedder, s), embed(embedder, s))


def test_start_only_is_finite(embedder, tokenizer):
    v = embed(embedder, tokenizer.tokenize(""))
    assert v.shape == (embedder.output_dim,)
    assert np.isfinite(v).all()


def test_output_shape_is_length_invariant(embedder, tokenizer):
    idx = tokenizer.index
    for length in (1, 50, 512):
        ids = np.array([[tokenizer.start_id] + [idx["7"]] * (length - 1)])
        out = embedder.forward_ids(ids, np.ones_like(ids, dtype=bool))
        assert out.shape == (1, embedder.output_dim)


def test_unseen_variable_subsets_embed(embedder, tokenizer):
    for names in (["NH4_3"], ["TMIN_SOIL_5", "WIND"], list(REGISTRY.names)):
        v = embed(embedder, tokenizer.encode_record({n: 1.0 for n in names}))
        assert np.isfinite(v).all()


def test_values_change_the_embedding(embedder, tokenizer):
    a = embed(embedder, tokenizer.encode_record({"GPP": 1.0, "ET": 2.0}))
    b = embed(embedder, tokenizer.encode_record({"GPP": 1.0, "ET": 3.0}))
    assert np.linalg.norm(a - b) > 0


def test_trained_embedder_still_separates_values(tokenizer, small_embedder_cfg, drivers, outputs):
    cfg = DecoderConfig(hidden=5, window=4, windows_per_epoch=4, batch_size=2)
    d = Decoder(tokenizer, small_embedder_cfg, cfg, nx.make_rng(0), targets=("GPP", "ET"))
    d.y_scale = Standardizer(np.zeros(2), np.ones(2))
    examples = make_examples(d, {x.site_id: outputs[x.site_id]["PBM-A"].bundles for x in drivers},
                             {x.site_id: x for x in drivers},
                             {x.site_id: outputs[x.site_id]["PBM-A"] for x in drivers})
    before = d.params["embedder.tokens"].data.copy()
    train_decoder(d, examples, epochs=2, lr=0.01, seed=3)
    assert not np.array_equal(d.params["embedder.tokens"].data, before)

    rng = np.random.default_rng(8)
    for _ in range(20):
        names = [m for m in REGISTRY.names if rng.random() < 0.2] or ["GPP"]
        record = {m: float(rng.normal() * 10.0 ** rng.integers(-2, 3)) for m in names}
        changed = str(rng.choice(names))
        other = {**record, changed: record[changed] + 1.0 + abs(record[changed])}
        a = embed(d.embedder, tokenizer.encode_record(record))
        b = embed(d.embedder, tokenizer.encode_record(other))
        assert np.linalg.norm(a - b) > 0


def test_rejects_missing_start_and_overlong_input(embedder, tokenizer):
    with pytest.raises(SchemaError, match="START"):
        embedder.forward_ids(np.array([[5, 6]]), np.ones((1, 2), dtype=bool))
    with pytest.raises(ShapeError):
        embedder.forward_ids(np.ones((1, 513), dtype=np.int64), np.ones((1, 513), dtype=bool))
    with pytest.raises(SchemaError):
        Embedder(Tokenizer.from_registry(max_len=64), EmbedderConfig(max_len=128), nx.make_rng(0))


def test_attention_block_gradcheck(embedder, tokenizer):
    seqs = random_sequences(tokenizer, 3, seed=4)
    target = np.random.default_rng(4).normal(size=(3, embedder.output_dim))
    rng = np.random.default_rng(5)
    entries = [(name, int(rng.integers(p.size))) for name, p in embedder.params.items() for _ in range(4)]

    def loss():
        return nx.mse(embedder.embed_batch(seqs), target)

    assert nx.gradcheck(loss, embedder.params, entries=entries) < 1e-4
