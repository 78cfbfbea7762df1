#!/usr/bin/env python3
"""
Tests for record linearization, the tokenizer and the variable registry
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

import numpy as np
import pytest

from kgfm.errors import CheckpointError, SchemaError
from kgfm.linearizer import (
    NUMBER_CHARS, SEPARATORS, Tokenizer, detokenize, format_value, linearize, merge_records, tokenize,
)
from kgfm.registry import REGISTRY, union_schema


def random_record(rng):
    names = [n for n in REGISTRY.names if rng.random() < 0.4]
    scales = 10.0 ** rng.integers(-6, 6, size=len(names))
    return {n: float(v) for n, v in zip(names, rng.normal(size=len(names)) * scales)}


def test_registry_order():
    names = REGISTRY.names
    assert names[:6] == ("CO2_FLUX", "Delta_SOC", "GPP", "LAI", "Reco", "Yield")
    assert REGISTRY.module_of("ET") == "water"
    assert REGISTRY.module_of("TMAX") == "driver"
    assert union_schema("nitrogen") == ("N2O_FLUX", "NH4_1", "NH4_2", "NH4_3", "NO3_1", "NO3_3", "NO3_5")


def test_linearize_examples():
    record = {"CO2_FLUX": 13, "GPP": 25, "Reco": -8, "N2O_FLUX": -0.003}
    assert linearize(record) == "CO2_FLUX: 13, GPP: 25, Reco: -8, N2O_FLUX: -0.003"
    assert linearize({}) == ""
    assert linearize({"GPP": 1.23456}) == "GPP: 1.235"


def test_linearize_orders_by_registry_not_input():
    assert linearize({"TMAX": 1.0, "GPP": 2.0}) == linearize({"GPP": 2.0, "TMAX": 1.0}) == "GPP: 2, TMAX: 1"


def test_linearize_rejects_unknown_names():
    with pytest.raises(SchemaError, match="NEE"):
        linearize({"NEE": 1.0})


def test_format_value_rules():
    assert format_value(1234567.0) == "1.235e6"
    assert format_value(0.00001234) == "1.234e-5"
    assert format_value(2.5000) == "2.5"
    assert format_value(-0.0) == "0"


def test_linearize_omits_nan_and_single_variables():
    record = {"GPP": 3.0, "ET": 1.5, "TMIN": -2.0}
    assert linearize({**record, "N2O_FLUX": float("nan")}) == linearize(record)
    full = linearize(record)
    without = linearize({"GPP": 3.0, "TMIN": -2.0})
    assert full.replace("ET: 1.5, ", "") == without


def test_tokenize_examples(tokenizer):
    assert tokenize("", tokenizer).ids.tolist() == [tokenizer.start_id]
    ids = tokenize("GPP: 25", tokenizer).ids.tolist()
    idx = tokenizer.index
    assert ids == [tokenizer.start_id, idx["GPP"], idx[":"], idx["2"], idx["5"]]


def test_tokenize_rejects_characters_outside_the_scheme(tokenizer):
    with pytest.raises(SchemaError, match="offset"):
        tokenizer.tokenize("GPP: 2 kg")


def test_round_trip_over_random_records(tokenizer):
    rng = np.random.default_rng(0)
    for _ in range(100):
        text = linearize(random_record(rng))
        assert detokenize(tokenize(text, tokenizer), tokenizer) == text


def test_vocabulary_size(tokenizer):
    assert len(NUMBER_CHARS) == 13
    assert len(tokenizer) == len(REGISTRY) + len(SEPARATORS) + len(NUMBER_CHARS) + 2


def test_truncation_is_counted(caplog):
    tok = Tokenizer.from_registry(max_len=6)
    seq = tok.tokenize("GPP: 12345, ET: 1")
    assert seq.truncated and len(seq) == 6
    assert tok.truncations == 1
    assert "truncated" in caplog.text


def test_vocabulary_file_round_trip(tmp_path, tokenizer):
    path = tokenizer.save(tmp_path / "vocab.txt")
    loaded = Tokenizer.load(path, expected_hash=tokenizer.vocab_hash)
    assert loaded.tokens == tokenizer.tokens
    with pytest.raises(CheckpointError):
        Tokenizer.load(path, expected_hash="0" * 64)


def test_pad_batch(tokenizer):
    a, b = tokenizer.tokenize("GPP: 1"), tokenizer.tokenize("")
    ids, mask = tokenizer.pad_batch([a, b])
    assert ids.shape == (2, len(a))
    assert mask.sum(axis=1).tolist() == [len(a), 1]
    assert (ids[1, 1:] == tokenizer.pad_id).all()


def test_merge_records_refuses_duplicates():
    assert merge_records([{"GPP": 1.0}, {"TMAX": 2.0}]) == {"GPP": 1.0, "TMAX": 2.0}
    with pytest.raises(SchemaError, match="twice"):
        merge_records([{"GPP": 1.0}, {"GPP": 2.0}])
