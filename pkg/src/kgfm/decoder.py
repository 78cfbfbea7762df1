"""
LM-enhanced decoder: per-day embedding of the combined fluxes plus drivers,
a unidirectional LSTM over days, and one linear head per target.

Training runs on randomly drawn windows of consecutive days; the loss is
masked MSE, so days or PBMs without a target value contribute nothing.
"""

import copy
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import DecoderConfig, EmbedderConfig
from .embedder import Embedder
from .errors import DataError, KGFMError, NonFiniteError, SchemaError, ShapeError
from .linearizer import TokenSequence, Tokenizer
from .numerics import Params, Standardizer, Tensor
from .registry import MODULES, TARGETS
from .synthetic_pbm import DriverSeries, FluxBundle, ObservationSeries, PBMOutput

log = logging.getLogger("kgfm.decoder")

EMBED_CHUNK = 64


# -------------------------
# LSTM
# -------------------------

def init_lstm(rng: np.random.Generator, params: Params, prefix: str, n_in: int, hidden: int) -> None:
    for gate in ("i", "f", "o", "g"):
        nx.init_linear(rng, params, f"{prefix}.{gate}", n_in + hidden, hidden)


def lstm_cell(x_t: nx.ArrayLike, state: Tuple[nx.ArrayLike, nx.ArrayLike], params: Mapping[str, Tensor],
              prefix: str = "lstm") -> Tuple[Tensor, Tensor]:
    """i, f, o = σ(W[x,h] + b); g = tanh(W_g[x,h] + b_g); c' = f∘c + i∘g; h' = o∘tanh(c')."""
    x = nx.as_tensor(x_t)
    h, c = nx.as_tensor(state[0]), nx.as_tensor(state[1])
    expected = params[f"{prefix}.i.W"].shape[0]
    if x.shape[-1] + h.shape[-1] != expected or h.shape != c.shape:
        raise ShapeError("lstm_cell", x.shape, h.shape, c.shape, detail=f"expects {expected} = input + hidden")
    xh = nx.concat([x, h], axis=-1)
    i = nx.sigmoid(nx.linear(xh, params, f"{prefix}.i"))
    f = nx.sigmoid(nx.linear(xh, params, f"{prefix}.f"))
    o = nx.sigmoid(nx.linear(xh, params, f"{prefix}.o"))
    g = nx.tanh(nx.linear(xh, params, f"{prefix}.g"))
    c_next = nx.add(nx.mul(f, c), nx.mul(i, g))
    return nx.mul(o, nx.tanh(c_next)), c_next


def run_lstm(xs: Tensor, params: Mapping[str, Tensor], prefix: str, hidden: int) -> Tensor:
    """(B, T, I) -> (B, T, H), zero initial state."""
    B, T = xs.shape[0], xs.shape[1]
    h = Tensor(np.zeros((B, hidden)))
    c = Tensor(np.zeros((B, hidden)))
    hs = []
    for t in range(T):
        h, c = lstm_cell(nx.slice_(xs, (slice(None), t)), (h, c), params, prefix)
        hs.append(h)
    return nx.stack(hs, axis=1)


# -------------------------
# Series types
# -------------------------

@dataclass
class PredictionSeries:
    site_id: str
    names: Tuple[str, ...]
    values: np.ndarray  # (T, K)
    first_day: int = 1

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.first_day, self.first_day + self.T)

    def get(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def record(self, t: int) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values[t])}


@dataclass
class SequenceExample:
    """One site's aligned inputs and raw-unit targets; NaN marks a missing target."""

    site_id: str
    inputs: Any  # list of TokenSequence (decoder) or (T, 16) array (baseline)
    targets: np.ndarray  # (T, len(TARGETS))
    days: np.ndarray

    def __post_init__(self) -> None:
        if len(self.inputs) != self.targets.shape[0] or len(self.days) != self.targets.shape[0]:
            raise ShapeError("SequenceExample", (len(self.inputs),), self.targets.shape, (len(self.days),),
                             detail=self.site_id)

    @property
    def T(self) -> int:
        return self.targets.shape[0]


def daily_records(combined: Mapping[str, FluxBundle], x: DriverSeries) -> List[Dict[str, float]]:
    """Per day: module bundles carbon, water, nitrogen, thermal, then drivers."""
    for module, bundle in combined.items():
        if bundle.values.shape[0] != x.T:
            raise ShapeError("decode", bundle.values.shape, x.features.shape, detail=f"{module} vs drivers")
    records = []
    for t in range(x.T):
        rec: Dict[str, float] = {}
        for module in MODULES:
            if module in combined:
                rec.update(combined[module].record(t))
        rec.update(x.record(t))
        records.append(rec)
    return records


def target_matrix(source: Any, T: int, targets: Sequence[str] = TARGETS) -> np.ndarray:
    """(T, K) raw targets from a PBMOutput or an ObservationSeries; NaN where absent."""
    out = np.full((T, len(targets)), np.nan)
    if isinstance(source, PBMOutput):
        for k, name in enumerate(targets):
            if source.has(name):
                out[:, k] = source.get(name)
    elif isinstance(source, ObservationSeries):
        unknown = set(source.names) - set(targets)
        if unknown:
            raise SchemaError(f"observed targets {sorted(unknown)} have no decoder head")
        for j, name in enumerate(source.names):
            out[:, targets.index(name)] = np.where(source.mask[:, j], source.values[:, j], np.nan)
    else:
        raise DataError(f"cannot read targets from {type(source).__name__}")
    return out


# -------------------------
# Window training, shared with the baseline
# -------------------------

def _draw_windows(rng: np.random.Generator, examples: Sequence[SequenceExample], width: int,
                  count: int) -> List[Tuple[int, int]]:
    picks = []
    for _ in range(count):
        e = int(rng.integers(len(examples)))
        picks.append((e, int(rng.integers(examples[e].T - width + 1))))
    return picks


def _window_loss(model: Any, examples: Sequence[SequenceExample], picks: Sequence[Tuple[int, int]],
                 width: int) -> Optional[Tensor]:
    inputs = [examples[e].inputs[s:s + width] for e, s in picks]
    target = np.stack([model.y_scale.apply(examples[e].targets[s:s + width]) for e, s in picks])
    mask = np.isfinite(target)
    if not mask.any():
        return None
    return nx.mse(model.forward_batch(inputs), target, mask)


def fit_windows(model: Any, examples: Sequence[SequenceExample], *, epochs: int, lr: float, seed: int,
                window: int, windows_per_epoch: int, batch_size: int, label: str,
                stream: int = 0) -> List[float]:
    """
    Adam on masked MSE over randomly drawn day windows.

    ``model`` provides ``params``, ``y_scale`` and ``forward_batch(inputs)``.
    Returns the loss on a fixed monitoring batch: entry 0 before training, entry e
    after epoch e.
    """
    if not examples:
        raise DataError(f"{label}: no training sequences")
    if model.y_scale is None:
        model.y_scale = Standardizer.fit(np.concatenate([ex.targets for ex in examples]))
    width = min(window, min(ex.T for ex in examples))
    rng = nx.make_rng(seed, 202, stream)
    monitor = _draw_windows(rng, examples, width, batch_size)
    opt = nx.Adam(model.params, learning_rate=lr)

    def monitor_loss() -> float:
        loss = _window_loss(model, examples, monitor, width)
        return loss.item() if loss is not None else float("nan")

    t0 = time.monotonic()
    curve = [monitor_loss()]
    for epoch in range(1, epochs + 1):
        picks = _draw_windows(rng, examples, width, windows_per_epoch)
        total, steps = 0.0, 0
        for b, start in enumerate(range(0, len(picks), batch_size)):
            batch = picks[start:start + batch_size]

            def loss_fn() -> Tensor:
                loss = _window_loss(model, examples, batch, width)
                if loss is None:
                    raise _EmptyBatch()
                return loss

            try:
                total += nx.fit_step(loss_fn, opt)
                steps += 1
            except _EmptyBatch:
                log.debug("%s: batch %d has no observed target, skipped", label, b)
            except NonFiniteError as e:
                raise NonFiniteError(e.op, where=f"{label} epoch {epoch} batch {b}") from e
        curve.append(monitor_loss())
        log.info("%s epoch %d/%d train %.5f monitor %.5f", label, epoch, epochs,
                 total / max(steps, 1), curve[-1])
    log.info("%s trained in %.0fms", label, (time.monotonic() - t0) * 1000)
    return curve


class _EmptyBatch(KGFMError):
    pass


# -------------------------
# Decoder
# -------------------------

class Decoder:
    def __init__(self, tokenizer: Tokenizer, embedder_cfg: EmbedderConfig, cfg: DecoderConfig,
                 rng: np.random.Generator, targets: Sequence[str] = TARGETS):
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.targets: Tuple[str, ...] = tuple(targets)
        self.embedder = Embedder(tokenizer, embedder_cfg, rng, prefix="embedder")
        self.params: Params = dict(self.embedder.params)
        init_lstm(rng, self.params, "lstm", embedder_cfg.d_model, cfg.hidden)
        nx.init_linear(rng, self.params, "heads", cfg.hidden, len(self.targets))
        self.y_scale: Optional[Standardizer] = None

    def encode_days(self, combined: Mapping[str, FluxBundle], x: DriverSeries) -> List[TokenSequence]:
        return [self.tokenizer.encode_record(r) for r in daily_records(combined, x)]

    def forward_batch(self, inputs: Sequence[Sequence[TokenSequence]]) -> Tensor:
        """B windows of W daily token sequences -> (B, W, K) normalized predictions."""
        B, W = len(inputs), len(inputs[0])
        flat = [s for window in inputs for s in window]
        if len(flat) != B * W:
            raise ShapeError("decoder", (B, W), (len(flat),), detail="ragged windows")
        u = nx.reshape(self.embedder.embed_batch(flat), (B, W, self.embedder.output_dim))
        h = run_lstm(u, self.params, "lstm", self.cfg.hidden)
        return nx.linear(h, self.params, "heads")

    def predict_tokens(self, days: Sequence[TokenSequence]) -> np.ndarray:
        """Inference over a full sequence; returns raw-unit (T, K)."""
        if self.y_scale is None:
            raise DataError("decoder has no target statistics; train or load it first")
        emb = np.concatenate([self.embedder.embed_batch(days[i:i + EMBED_CHUNK]).data
                              for i in range(0, len(days), EMBED_CHUNK)])
        h = run_lstm(Tensor(emb[None]), self.params, "lstm", self.cfg.hidden)
        return self.y_scale.invert(nx.linear(h, self.params, "heads").data[0])

    def copy(self) -> "Decoder":
        return copy.deepcopy(self)

    def to_checkpoint(self, config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None,
                      meta: Optional[Dict[str, Any]] = None) -> ckpt_io.Checkpoint:
        if self.y_scale is None:
            raise DataError("decoder has no target statistics; train it before saving")
        return ckpt_io.Checkpoint(
            kind="decoder", params={k: v.data for k, v in self.params.items()}, config=config or {},
            vocab_hash=self.tokenizer.vocab_hash, seed=seed, normalization=self.y_scale.to_arrays("y"),
            meta={"targets": list(self.targets), "decoder": dict(vars(self.cfg)),
                  "embedder": dict(vars(self.embedder.cfg)), **(meta or {})},
        )

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, tokenizer: Tokenizer) -> "Decoder":
        ck.require_vocab(tokenizer.vocab_hash)
        m = ck.meta
        d = cls(tokenizer, EmbedderConfig(**m["embedder"]), DecoderConfig(**m["decoder"]), nx.make_rng(0),
                targets=m["targets"])
        ckpt_io.assign(d.params, ck.params, "decoder")
        d.y_scale = Standardizer.from_arrays(ck.normalization, "y")
        return d


def decode(d: Decoder, combined: Mapping[str, FluxBundle], x: DriverSeries) -> PredictionSeries:
    values = d.predict_tokens(d.encode_days(combined, x))
    return PredictionSeries(x.site_id, d.targets, values)


def make_examples(d: Decoder, combined_per_site: Mapping[str, Mapping[str, FluxBundle]],
                  drivers: Mapping[str, DriverSeries], targets: Mapping[str, Any],
                  boundary: Optional[int] = None) -> List[SequenceExample]:
    """Token the inputs once per site; ``boundary`` keeps days 1..boundary only."""
    out = []
    for site in sorted(combined_per_site):
        x = drivers[site]
        y = target_matrix(targets[site], x.T, d.targets)
        tokens = d.encode_days(combined_per_site[site], x)
        days = x.days
        if boundary is not None:
            tokens, y, days = tokens[:boundary], y[:boundary], days[:boundary]
        out.append(SequenceExample(site, tokens, y, days))
    return out


def train_decoder(d: Decoder, examples: Sequence[SequenceExample], epochs: int, lr: float,
                  seed: int) -> Tuple[Decoder, List[float]]:
    """Pretrain on simulated sequences of every PBM (surrogates already frozen)."""
    curve = fit_windows(d, examples, epochs=epochs, lr=lr, seed=seed, window=d.cfg.window,
                        windows_per_epoch=d.cfg.windows_per_epoch, batch_size=d.cfg.batch_size,
                        label="decoder", stream=1)
    return d, curve


def reject_future_days(examples: Iterable[SequenceExample], boundary: Optional[int]) -> None:
    if boundary is None:
        return
    for ex in examples:
        if len(ex.days) and int(ex.days.max()) > boundary:
            raise DataError(f"{ex.site_id}: fine-tuning data reaches day {int(ex.days.max())}, "
                            f"past the split boundary {boundary}")


def finetune(d: Decoder, examples: Sequence[SequenceExample], epochs: int, lr: float, seed: int,
             boundary: Optional[int] = None, label: str = "finetune") -> Tuple[Decoder, List[float]]:
    """Copy of ``d`` tuned on observed targets; embedder, LSTM and heads all update."""
    if not examples or not any(np.isfinite(ex.targets).any() for ex in examples):
        raise DataError("finetune: empty observation set")
    reject_future_days(examples, boundary)
    tuned = d.copy()
    if epochs == 0:
        return tuned, []
    curve = fit_windows(tuned, examples, epochs=epochs, lr=lr, seed=seed, window=d.cfg.window,
                        windows_per_epoch=d.cfg.windows_per_epoch, batch_size=d.cfg.batch_size,
                        label=label, stream=2)
    return tuned, curve


# -------------------------
# Export
# -------------------------

def export_predictions(predictions: Iterable[PredictionSeries], path: os.PathLike,
                       observations: Optional[Mapping[str, ObservationSeries]] = None,
                       days: Optional[Tuple[int, int]] = None, **labels: str) -> Path:
    """JSON lines {"site", "day", "y_hat", "y"?, **labels}; ``days`` is an inclusive 1-based range."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for pred in predictions:
                obs = (observations or {}).get(pred.site_id)
                for t, day in enumerate(pred.days):
                    if days is not None and not days[0] <= day <= days[1]:
                        continue
                    rec: Dict[str, Any] = {**labels, "site": pred.site_id, "day": int(day), "y_hat": pred.record(t)}
                    if obs is not None:
                        rec["y"] = obs.record(t)
                    fh.write(json.dumps(rec) + "\n")
    except OSError as e:
        raise DataError(f"cannot write predictions {path}: {e}") from e
    return path


def read_predictions(path: os.PathLike) -> List[Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as e:
        raise DataError(f"cannot read predictions {path}: {e}") from e
