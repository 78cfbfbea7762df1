"""
Model selection: embed each observed day's [drivers, observations] record,
run an MLP to M·N raw scores, average over days, softmax over the PBMs of
each module. Trained on observations synthesized from preset weight grids.
"""

import itertools
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import checkpoint as ckpt_io
from . import numerics as nx
from .config import EmbedderConfig, SelectorConfig
from .embedder import Embedder
from .errors import ConfigError, DataError, KGFMError, NonFiniteError
from .linearizer import TokenSequence, Tokenizer
from .numerics import Params, Tensor
from .registry import ANNUAL, MODULES, PBM_IDS, SELECTOR_OBSERVABLES
from .synthetic_pbm import DriverSeries, ObservationSeries, PBMOutput, synthesize_observations
from .weights import WeightMatrix

log = logging.getLogger("kgfm.selector")

GRID_LOW, GRID_HIGH = 0.1, 0.9
EMBED_CHUNK = 64

# (drivers, {pbm_id: simulated output}) for one site
SelectorSite = Tuple[DriverSeries, Mapping[str, PBMOutput]]


# -------------------------
# Weight grid
# -------------------------

@dataclass(frozen=True, eq=False)
class WeightGrid:
    first: np.ndarray  # (P, N) first-PBM weight per module
    step: float
    pbm_ids: Tuple[str, ...] = PBM_IDS
    modules: Tuple[str, ...] = MODULES

    @property
    def M(self) -> int:
        return len(self.pbm_ids)

    @property
    def N(self) -> int:
        return len(self.modules)

    @property
    def axis(self) -> Tuple[float, ...]:
        return tuple(sorted(set(self.first.reshape(-1).tolist())))

    def __len__(self) -> int:
        return self.first.shape[0]

    def __getitem__(self, i: int) -> WeightMatrix:
        return WeightMatrix.from_first(self.first[i], self.pbm_ids, self.modules)

    def __iter__(self) -> Iterator[WeightMatrix]:
        return (self[i] for i in range(len(self)))

    @property
    def presets(self) -> List[WeightMatrix]:
        return list(self)

    def reordered(self, pbm_ids: Sequence[str]) -> "WeightGrid":
        """Same presets with the PBM roles swapped (M = 2)."""
        if tuple(pbm_ids) == self.pbm_ids:
            return self
        if sorted(pbm_ids) != sorted(self.pbm_ids):
            raise KGFMError(f"cannot reorder grid over {self.pbm_ids} to {tuple(pbm_ids)}")
        return WeightGrid(np.round(1.0 - self.first, 10), self.step, tuple(pbm_ids), self.modules)


def build_weight_grid(M: int = 2, N: int = 4, step: float = 0.1, pbm_ids: Optional[Sequence[str]] = None,
                      modules: Optional[Sequence[str]] = None) -> WeightGrid:
    """Cartesian product over N modules of first-PBM weights 0.1, 0.1+step, ... <= 0.9."""
    if M != 2:
        raise ConfigError(f"weight grids are defined for two PBMs only, got M={M}")
    if not 0 < step <= 0.8:
        raise ConfigError(f"grid step must be in (0, 0.8], got {step}")
    axis = []
    k = 0
    while GRID_LOW + k * step <= GRID_HIGH + 1e-9:
        axis.append(round(GRID_LOW + k * step, 10))
        k += 1
    if not axis:
        raise ConfigError(f"grid step {step} leaves an empty axis")
    pbm_ids = tuple(pbm_ids or PBM_IDS[:M])
    modules = tuple(modules or MODULES[:N])
    if len(pbm_ids) != M or len(modules) != N:
        raise ConfigError(f"grid needs {M} PBM ids and {N} modules")
    first = np.array(list(itertools.product(axis, repeat=N)), dtype=np.float64).reshape(-1, N)
    return WeightGrid(first, step, pbm_ids, modules)


# -------------------------
# Selector
# -------------------------

class Selector:
    def __init__(self, tokenizer: Tokenizer, embedder_cfg: EmbedderConfig, cfg: SelectorConfig,
                 rng: np.random.Generator, pbm_ids: Sequence[str] = PBM_IDS, modules: Sequence[str] = MODULES):
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.pbm_ids = tuple(pbm_ids)
        self.modules = tuple(modules)
        self.embedder = Embedder(tokenizer, embedder_cfg, rng, prefix="selector.embedder")
        self.params: Params = dict(self.embedder.params)
        nx.init_linear(rng, self.params, "selector.mlp.hidden", embedder_cfg.d_model, cfg.hidden)
        # zero output layer: every column starts at the uniform mixture
        width = len(self.pbm_ids) * len(self.modules)
        self.params["selector.mlp.out.W"] = Tensor(np.zeros((cfg.hidden, width)), requires_grad=True,
                                                   name="selector.mlp.out.W")
        self.params["selector.mlp.out.b"] = Tensor(np.zeros(width), requires_grad=True, name="selector.mlp.out.b")

    @property
    def M(self) -> int:
        return len(self.pbm_ids)

    @property
    def N(self) -> int:
        return len(self.modules)

    def raw_scores(self, days: Sequence[TokenSequence]) -> Tensor:
        """(n_days, N·M) MLP outputs, module-major."""
        z = self.embedder.embed_batch(days)
        hidden = nx.relu(nx.linear(z, self.params, "selector.mlp.hidden"))
        return nx.linear(hidden, self.params, "selector.mlp.out")

    def forward_windows(self, windows: Sequence[Sequence[TokenSequence]]) -> Tensor:
        """B equal-length windows -> (B, N, M) weights, softmax over M."""
        B, W = len(windows), len(windows[0])
        raw = self.raw_scores([s for w in windows for s in w])
        per_day = nx.reshape(raw, (B, W, self.N, self.M))
        return nx.softmax_rows(nx.mean(per_day, axis=1))

    def encode_days(self, observations: ObservationSeries, drivers: DriverSeries) -> Tuple[List[TokenSequence], np.ndarray]:
        if observations.T != drivers.T:
            raise DataError(f"{drivers.site_id}: observations cover {observations.T} days, drivers {drivers.T}")
        observed = np.flatnonzero(observations.mask.any(axis=1))
        days = [self.tokenizer.encode_record({**observations.record(t), **drivers.record(t)}) for t in observed]
        return days, observed

    def to_checkpoint(self, config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(
            kind="selector", params={k: v.data for k, v in self.params.items()}, config=config or {},
            vocab_hash=self.tokenizer.vocab_hash, seed=seed,
            meta={"pbm_ids": list(self.pbm_ids), "modules": list(self.modules), "selector": dict(vars(self.cfg)),
                  "embedder": dict(vars(self.embedder.cfg))},
        )

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, tokenizer: Tokenizer) -> "Selector":
        ck.require_vocab(tokenizer.vocab_hash)
        m = ck.meta
        s = cls(tokenizer, EmbedderConfig(**m["embedder"]), SelectorConfig(**m["selector"]), nx.make_rng(0),
                m["pbm_ids"], m["modules"])
        ckpt_io.assign(s.params, ck.params, "selector")
        return s


@dataclass
class WeightInference:
    weights: WeightMatrix
    raw: np.ndarray  # (n_days, N·M) per-day MLP outputs
    days: np.ndarray  # 1-based observed days

    def to_report(self) -> Dict[str, Any]:
        return {**self.weights.to_report(),
                "diagnostics": {"days": self.days.tolist(), "raw_outputs": self.raw.tolist(),
                                "layout": [f"{n}/{m}" for n in self.weights.modules for m in self.weights.pbm_ids]}}


def infer_weights_detailed(s: Selector, observations: ObservationSeries, drivers: DriverSeries) -> WeightInference:
    days, observed = s.encode_days(observations, drivers)
    if not days:
        raise DataError(f"{observations.site_id}: no observed day to infer weights from")
    raw = np.concatenate([s.raw_scores(days[i:i + EMBED_CHUNK]).data for i in range(0, len(days), EMBED_CHUNK)])
    avg = raw.mean(axis=0).reshape(s.N, s.M)
    alpha_t = nx.softmax_rows(avg).data
    return WeightInference(WeightMatrix(alpha_t.T, s.pbm_ids, s.modules), raw, observed + 1)


def infer_weights(s: Selector, observations: ObservationSeries, drivers: DriverSeries) -> WeightMatrix:
    return infer_weights_detailed(s, observations, drivers).weights


def infer_weights_pooled(s: Selector, sites: Sequence[Tuple[ObservationSeries, DriverSeries]]) -> WeightInference:
    """Average raw outputs over every observed day of every site, then normalize."""
    raws, days = [], []
    for obs, x in sites:
        inf = infer_weights_detailed(s, obs, x)
        raws.append(inf.raw)
        days.append(inf.days)
    if not raws:
        raise DataError("infer_weights: empty observation set")
    raw = np.concatenate(raws)
    alpha_t = nx.softmax_rows(raw.mean(axis=0).reshape(s.N, s.M)).data
    return WeightInference(WeightMatrix(alpha_t.T, s.pbm_ids, s.modules), raw, np.concatenate(days))


# -------------------------
# Training
# -------------------------

def _observable_subset(rng: np.random.Generator, observables: Sequence[str], keep: float) -> Tuple[str, ...]:
    chosen = tuple(o for o in observables if rng.random() < keep)
    return chosen or (observables[int(rng.integers(len(observables)))],)


def _draw_examples(s: Selector, rng: np.random.Generator, sites: Sequence[SelectorSite], grid: WeightGrid,
                   count: int, width: int) -> List[Tuple[List[TokenSequence], np.ndarray]]:
    examples = []
    for _ in range(count):
        preset = grid[int(rng.integers(len(grid)))]
        drivers, outputs = sites[int(rng.integers(len(sites)))]
        start = int(rng.integers(drivers.T - width + 1))
        names = _observable_subset(rng, s.cfg.observables, s.cfg.keep_probability)
        obs = synthesize_observations(preset, drivers, outputs, names).window(start, start + width)
        days, _ = s.encode_days(obs, drivers.window(start, start + width))
        examples.append((days, preset.alpha.T.copy()))
    return examples


def _selector_loss(s: Selector, batch: Sequence[Tuple[List[TokenSequence], np.ndarray]]) -> Tensor:
    pred = s.forward_windows([days for days, _ in batch])
    return nx.mse(pred, np.stack([target for _, target in batch]))


def train_selector(s: Selector, sites: Sequence[SelectorSite], grid: WeightGrid, epochs: int, lr: float,
                   seed: int) -> Tuple[Selector, List[float]]:
    """
    Direct supervision on preset weights. Each epoch draws ``presets_per_epoch``
    presets uniformly from the grid, one random site and 30-day window each.
    Returns the loss curve on a fixed monitoring batch (entry 0 before training).
    """
    if not sites:
        raise DataError("train_selector: no simulated sites")
    annual = sorted(set(s.cfg.observables) & set(ANNUAL))
    if annual:
        raise ConfigError(f"train_selector: annual variables {annual} cannot fill daily observation windows")
    if grid.pbm_ids != s.pbm_ids or grid.modules != s.modules:
        raise KGFMError(f"grid over {grid.pbm_ids} does not match selector over {s.pbm_ids}")
    width = min(s.cfg.window, min(d.T for d, _ in sites))
    rng = nx.make_rng(seed, 404)
    monitor = _draw_examples(s, rng, sites, grid, s.cfg.batch_size, width)
    opt = nx.Adam(s.params, learning_rate=lr)

    t0 = time.monotonic()
    curve = [_selector_loss(s, monitor).item()]
    for epoch in range(1, epochs + 1):
        examples = _draw_examples(s, rng, sites, grid, s.cfg.presets_per_epoch, width)
        total, steps = 0.0, 0
        for b, start in enumerate(range(0, len(examples), s.cfg.batch_size)):
            batch = examples[start:start + s.cfg.batch_size]
            try:
                total += nx.fit_step(lambda: _selector_loss(s, batch), opt)
            except NonFiniteError as e:
                raise NonFiniteError(e.op, where=f"selector epoch {epoch} batch {b}") from e
            steps += 1
        curve.append(_selector_loss(s, monitor).item())
        log.info("Selector epoch %d/%d train %.6f monitor %.6f", epoch, epochs, total / max(steps, 1), curve[-1])
    log.info("Selector trained in %.0fms", (time.monotonic() - t0) * 1000)
    return s, curve


# -------------------------
# Recovery curves and reports
# -------------------------

def recovery_curve(s: Selector, sites: Sequence[SelectorSite], module: str,
                   sweep: Sequence[float] = tuple(np.round(np.arange(0.1, 0.91, 0.1), 1)),
                   base: float = 0.5, observables: Sequence[str] = SELECTOR_OBSERVABLES,
                   window: Optional[int] = None) -> List[Dict[str, Any]]:
    """Sweep one module's first-PBM weight, others at ``base``; predicted weight averaged over sites."""
    rows = []
    for w in sweep:
        first = {m: (float(w) if m == module else base) for m in s.modules}
        preset = WeightMatrix.from_first(first, s.pbm_ids, s.modules)
        predicted = []
        for drivers, outputs in sites:
            obs = synthesize_observations(preset, drivers, outputs, observables)
            x = drivers
            if window:
                obs, x = obs.window(0, window), drivers.window(0, window)
            predicted.append(infer_weights(s, obs, x).weight(s.pbm_ids[0], module))
        rows.append({"module": module, "preset_weight": float(w), "predicted_weight": float(np.mean(predicted))})
    return rows


def write_recovery_csv(rows: Sequence[Mapping[str, Any]], path: os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(list(rows), columns=["preset_weight", "predicted_weight", "module"]).to_csv(
            path, index=False, float_format="%.6f")
    except OSError as e:
        raise DataError(f"cannot write recovery curve {path}: {e}") from e
    return path


def write_weight_report(inference: WeightInference, path: os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(inference.to_report(), indent=2), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write weight report {path}: {e}") from e
    return path
