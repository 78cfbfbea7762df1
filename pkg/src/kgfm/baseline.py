"""Drivers -> targets LSTM, the comparison baseline (no PBM knowledge)."""

import copy
import logging
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import DecoderConfig
from .decoder import (
    PredictionSeries, SequenceExample, fit_windows, init_lstm, reject_future_days, run_lstm, target_matrix,
)
from .errors import DataError
from .numerics import Params, Standardizer, Tensor
from .registry import DRIVERS, TARGETS
from .synthetic_pbm import DriverSeries

log = logging.getLogger("kgfm.baseline")


class BaselineLSTM:
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, targets: Sequence[str] = TARGETS):
        self.cfg = cfg
        self.targets = tuple(targets)
        self.params: Params = {}
        init_lstm(rng, self.params, "lstm", len(DRIVERS), cfg.hidden)
        nx.init_linear(rng, self.params, "heads", cfg.hidden, len(self.targets))
        self.x_scale: Optional[Standardizer] = None
        self.y_scale: Optional[Standardizer] = None

    def forward_batch(self, inputs: Sequence[np.ndarray]) -> Tensor:
        xz = self.x_scale.apply(np.stack(inputs))
        return nx.linear(run_lstm(Tensor(xz), self.params, "lstm", self.cfg.hidden), self.params, "heads")

    def predict(self, x: DriverSeries) -> PredictionSeries:
        if self.y_scale is None or self.x_scale is None:
            raise DataError("baseline has no normalization statistics; train or load it first")
        z = self.forward_batch([x.features]).data[0]
        return PredictionSeries(x.site_id, self.targets, self.y_scale.invert(z))

    def copy(self) -> "BaselineLSTM":
        return copy.deepcopy(self)

    def to_checkpoint(self, config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> ckpt_io.Checkpoint:
        if self.y_scale is None or self.x_scale is None:
            raise DataError("baseline has no normalization statistics; train it before saving")
        return ckpt_io.Checkpoint(
            kind="baseline", params={k: v.data for k, v in self.params.items()}, config=config or {}, seed=seed,
            normalization={**self.x_scale.to_arrays("x"), **self.y_scale.to_arrays("y")},
            meta={"targets": list(self.targets), "decoder": dict(vars(self.cfg))},
        )

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "BaselineLSTM":
        model = cls(DecoderConfig(**ck.meta["decoder"]), nx.make_rng(0), ck.meta["targets"])
        ckpt_io.assign(model.params, ck.params, "baseline")
        model.x_scale = Standardizer.from_arrays(ck.normalization, "x")
        model.y_scale = Standardizer.from_arrays(ck.normalization, "y")
        return model


def baseline_examples(drivers: Mapping[str, DriverSeries], targets: Mapping[str, Any],
                      boundary: Optional[int] = None, tag: str = "") -> List[SequenceExample]:
    out = []
    for site in sorted(targets):
        x = drivers[site]
        y = target_matrix(targets[site], x.T)
        feats, days = x.features, x.days
        if boundary is not None:
            feats, y, days = feats[:boundary], y[:boundary], days[:boundary]
        out.append(SequenceExample(f"{tag}{site}", feats, y, days))
    return out


def train_baseline_lstm(examples: Sequence[SequenceExample], cfg: DecoderConfig, seed: int,
                        epochs: Optional[int] = None, lr: Optional[float] = None) -> Tuple[BaselineLSTM, List[float]]:
    """Same hidden size, regimen and masking as the decoder."""
    if not examples:
        raise DataError("baseline: no training sequences")
    model = BaselineLSTM(cfg, nx.make_rng(seed, 303))
    model.x_scale = Standardizer.fit(np.concatenate([ex.inputs for ex in examples]))
    curve = fit_windows(model, examples, epochs=cfg.epochs if epochs is None else epochs,
                        lr=cfg.lr if lr is None else lr, seed=seed, window=cfg.window,
                        windows_per_epoch=cfg.windows_per_epoch, batch_size=cfg.batch_size,
                        label="baseline", stream=3)
    return model, curve


def finetune_baseline(model: BaselineLSTM, examples: Sequence[SequenceExample], epochs: int, lr: float,
                      seed: int, boundary: Optional[int] = None) -> Tuple[BaselineLSTM, List[float]]:
    if not examples or not any(np.isfinite(ex.targets).any() for ex in examples):
        raise DataError("finetune: empty observation set")
    reject_future_days(examples, boundary)
    tuned = model.copy()
    if epochs == 0:
        return tuned, []
    curve = fit_windows(tuned, examples, epochs=epochs, lr=lr, seed=seed, window=model.cfg.window,
                        windows_per_epoch=model.cfg.windows_per_epoch, batch_size=model.cfg.batch_size,
                        label="baseline-finetune", stream=4)
    return tuned, curve
