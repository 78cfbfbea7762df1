"""
One-block self-attention encoder: TokenSequence -> D-vector.

token + position embeddings -> single-head attention (padding keys masked)
-> residual feed-forward -> hidden state at START -> tanh(linear) to D.
"""

import math
from typing import Dict, Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import EmbedderConfig
from .errors import SchemaError, ShapeError
from .linearizer import TokenSequence, Tokenizer
from .numerics import Params, Tensor

_MASKED = -1e30


class Embedder:
    def __init__(self, tokenizer: Tokenizer, cfg: EmbedderConfig, rng: np.random.Generator,
                 prefix: str = "embedder"):
        if cfg.max_len > tokenizer.max_len:
            raise SchemaError(f"embedder max_len {cfg.max_len} exceeds tokenizer max_len {tokenizer.max_len}")
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.prefix = prefix
        d, p = cfg.d_tok, prefix
        self.params: Params = {
            f"{p}.tokens": nx.init_uniform(rng, (len(tokenizer), d), d, f"{p}.tokens"),
            f"{p}.positions": nx.init_uniform(rng, (cfg.max_len, d), d, f"{p}.positions"),
        }
        for name in ("query", "key", "value", "out"):
            self.params[f"{p}.{name}.W"] = nx.init_uniform(rng, (d, d), d, f"{p}.{name}.W")
        nx.init_linear(rng, self.params, f"{p}.ff1", d, cfg.d_ff)
        nx.init_linear(rng, self.params, f"{p}.ff2", cfg.d_ff, d)
        nx.init_linear(rng, self.params, f"{p}.pool", d, cfg.d_model)

    @property
    def output_dim(self) -> int:
        return self.cfg.d_model

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def forward_ids(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """(B, L) padded ids and validity mask -> (B, D)."""
        B, L = ids.shape
        if L > self.cfg.max_len:
            raise ShapeError("embed", ids.shape, detail=f"length exceeds max_len {self.cfg.max_len}")
        if not (ids[:, 0] == self.tokenizer.start_id).all():
            raise SchemaError("embed: every sequence must begin with [START]")
        if ids.size and ids.max() >= len(self.tokenizer):
            raise SchemaError(f"embed: token id {int(ids.max())} outside the vocabulary")
        d = self.cfg.d_tok

        tok = nx.reshape(nx.gather_rows(self._p("tokens"), ids.reshape(-1)), (B, L, d))
        h = nx.add(tok, nx.slice_(self._p("positions"), slice(0, L)))

        q = nx.matmul(h, self._p("query.W"))
        k = nx.matmul(h, self._p("key.W"))
        v = nx.matmul(h, self._p("value.W"))
        scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
        bias = np.where(mask, 0.0, _MASKED)[:, None, :]
        attn = nx.softmax_rows(nx.add(scores, bias))
        h = nx.add(h, nx.matmul(nx.matmul(attn, v), self._p("out.W")))

        ff = nx.linear(nx.relu(nx.linear(h, self.params, f"{self.prefix}.ff1")), self.params, f"{self.prefix}.ff2")
        h = nx.add(h, ff)

        pooled = nx.slice_(h, (slice(None), 0))
        return nx.tanh(nx.linear(pooled, self.params, f"{self.prefix}.pool"))

    def embed_batch(self, sequences: Sequence[TokenSequence]) -> Tensor:
        ids, mask = self.tokenizer.pad_batch(sequences)
        return self.forward_ids(ids, mask)

    def embed(self, sequence: TokenSequence) -> Tensor:
        return nx.slice_(self.embed_batch([sequence]), 0)

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def embed(e: Embedder, s: TokenSequence) -> np.ndarray:
    return e.embed(s).data


def embed_batch(e: Embedder, sequences: Sequence[TokenSequence], chunk: Optional[int] = None) -> np.ndarray:
    """Inference helper; ``chunk`` bounds the padded batch held at once."""
    if not chunk:
        return e.embed_batch(sequences).data
    rows = [e.embed_batch(sequences[i:i + chunk]).data for i in range(0, len(sequences), chunk)]
    return np.concatenate(rows, axis=0)
