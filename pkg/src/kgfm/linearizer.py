"""
Record -> "name: value, ..." text, and text -> token ids.

Token scheme: every registry name is one token, ":" and "," are tokens, and
numbers are spelled character by character over 0-9 . - e. Spaces carry no
information and are dropped; ``detokenize`` puts them back.
"""

import hashlib
import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, DataError, NonFiniteError, SchemaError
from .registry import REGISTRY, VariableRegistry

log = logging.getLogger("kgfm.linearizer")

PAD = "[PAD]"
START = "[START]"
SEPARATORS = (":", ",")
NUMBER_CHARS = tuple("0123456789.-e")
L_MAX = 512

_EXPONENT = re.compile(r"e([+-])0*(\d+)")


def format_value(value: float) -> str:
    """4 significant digits, no trailing zeros, compact exponent."""
    v = float(value)
    if not math.isfinite(v):
        raise NonFiniteError("linearize", where=repr(value))
    text = f"{v:.4g}"
    text = _EXPONENT.sub(lambda m: "e" + ("-" if m.group(1) == "-" else "") + m.group(2), text)
    return "0" if text == "-0" else text


def linearize(record: Mapping[str, float], registry: VariableRegistry = REGISTRY) -> str:
    """Registry-ordered text of ``record``; NaN values are left out."""
    registry.require(record.keys())
    parts = []
    for name in registry.ordered(record.keys()):
        value = record[name]
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        parts.append(f"{name}: {format_value(value)}")
    return ", ".join(parts)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # int64, starts with the START id
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Vocabulary plus encode/decode. The vocabulary is fixed once built."""

    def __init__(self, tokens: Sequence[str], max_len: int = L_MAX):
        if len(tokens) < 2 or tokens[0] != PAD or tokens[1] != START:
            raise SchemaError("vocabulary must begin with [PAD], [START]")
        if len(set(tokens)) != len(tokens):
            raise SchemaError("vocabulary has duplicate tokens")
        self.tokens: Tuple[str, ...] = tuple(tokens)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        self.max_len = max_len
        self.truncations = 0

    @classmethod
    def from_registry(cls, registry: VariableRegistry = REGISTRY, max_len: int = L_MAX) -> "Tokenizer":
        return cls([PAD, START, *registry.names, *SEPARATORS, *NUMBER_CHARS], max_len=max_len)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def start_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self.start_id]
        i, n = 0, len(text)
        while i < n:
            ch = text[i]
            if ch == " ":
                i += 1
            elif ch in SEPARATORS or ch in NUMBER_CHARS:
                ids.append(self.index[ch])
                i += 1
            elif "A" <= ch <= "Z":
                j = i + 1
                while j < n and (text[j].isalnum() or text[j] == "_"):
                    j += 1
                name = text[i:j]
                if name not in self.index:
                    raise SchemaError(f"tokenize: unknown name '{name}' at offset {i}")
                ids.append(self.index[name])
                i = j
            else:
                raise SchemaError(f"tokenize: character {ch!r} at offset {i} is outside the token scheme")
        truncated = len(ids) > self.max_len
        if truncated:
            self.truncations += 1
            log.warning("Token sequence of length %d truncated to %d (%d truncations so far)",
                        len(ids), self.max_len, self.truncations)
            ids = ids[: self.max_len]
        return TokenSequence(np.asarray(ids, dtype=np.int64), truncated)

    def detokenize(self, seq: TokenSequence) -> str:
        out: List[str] = []
        for i in seq.ids:
            tok = self.tokens[int(i)]
            if tok in (PAD, START):
                continue
            out.append(tok + " " if tok in SEPARATORS else tok)
        return "".join(out).rstrip(" ")

    def encode_record(self, record: Mapping[str, float]) -> TokenSequence:
        return self.tokenize(linearize(record))

    def pad_batch(self, sequences: Sequence[TokenSequence]) -> Tuple[np.ndarray, np.ndarray]:
        """(B, L) ids padded with PAD, and the (B, L) validity mask."""
        if not sequences:
            raise DataError("pad_batch: no sequences")
        width = max(len(s) for s in sequences)
        if width > self.max_len:
            raise SchemaError(f"sequence of length {width} exceeds max_len {self.max_len}")
        ids = np.full((len(sequences), width), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(sequences), width), dtype=bool)
        for b, s in enumerate(sequences):
            ids[b, : len(s)] = s.ids
            mask[b, : len(s)] = True
        return ids, mask

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        try:
            path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write vocabulary {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: os.PathLike, expected_hash: Optional[str] = None, max_len: int = L_MAX) -> "Tokenizer":
        try:
            tokens = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read vocabulary {path}: {e}") from e
        tok = cls(tokens, max_len=max_len)
        if expected_hash is not None and tok.vocab_hash != expected_hash:
            raise CheckpointError(f"vocabulary {path} does not match the checkpoint (hash {tok.vocab_hash[:12]})")
        return tok


def tokenize(text: str, tokenizer: Optional[Tokenizer] = None) -> TokenSequence:
    return (tokenizer or Tokenizer.from_registry()).tokenize(text)


def detokenize(seq: TokenSequence, tokenizer: Optional[Tokenizer] = None) -> str:
    return (tokenizer or Tokenizer.from_registry()).detokenize(seq)


def merge_records(records: Iterable[Mapping[str, float]]) -> Dict[str, float]:
    merged: Dict[str, float] = {}
    for r in records:
        for k, v in r.items():
            if k in merged:
                raise SchemaError(f"variable '{k}' appears twice in one record")
            merged[k] = v
    return merged
